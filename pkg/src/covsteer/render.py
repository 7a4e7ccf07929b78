"""SVG figures and a text summary drawn only from files written by the
other commands."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _col(rows, name):
    return np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "covsteer"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def render_fan(out: Path) -> Path:
    plt = _pyplot()
    fan = _read_csv(out / "plot_fan.csv")
    mean = _read_csv(out / "plot_mean.csv")
    cons = _read_csv(out / "plot_constraints.csv")
    fig, ax = plt.subplots(figsize=(6, 4.5))
    samples = sorted({int(r["sample"]) for r in fan})
    by_sample = {s: [] for s in samples}
    for r in fan:
        by_sample[int(r["sample"])].append(r)
    for s in samples:
        rows = by_sample[s]
        ax.plot(_col(rows, "x0"), _col(rows, "x1"), color="0.6", lw=0.5, alpha=0.6)
    ax.plot(_col(mean, "mu0"), _col(mean, "mu1"), "k-o", ms=3, lw=1.5, label="predicted mean")
    x_lo, x_hi = ax.get_xlim()
    y_lo, y_hi = ax.get_ylim()
    # widen the view so every boundary line, plus a band beyond it, is visible
    for r in cons:
        a0, a1, b = float(r["a0"]), float(r["a1"]), float(r["b"])
        pad = 0.1 * (y_hi - y_lo)
        if a1 != 0.0:
            ys = [-(a0 * x + b) / a1 for x in (x_lo, x_hi)]
            y_lo, y_hi = min(y_lo, min(ys) - pad), max(y_hi, max(ys) + pad)
        elif a0 != 0.0:
            xb = -b / a0
            x_lo, x_hi = min(x_lo, xb - pad), max(x_hi, xb + pad)
    for r in cons:
        a0, a1, b = float(r["a0"]), float(r["a1"]), float(r["b"])
        # infeasible side: a0 x0 + a1 x1 + b > 0
        gx, gy = np.meshgrid(np.linspace(x_lo, x_hi, 200), np.linspace(y_lo, y_hi, 200))
        ax.contourf(gx, gy, (a0 * gx + a1 * gy + b > 0).astype(float), levels=[0.5, 1.5],
                    colors=["tab:red"], alpha=0.2)
    ax.set_xlim(x_lo, x_hi)
    ax.set_ylim(y_lo, y_hi)
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    ax.set_title("Sampled state trajectories (shaded region: infeasible)")
    ax.legend(loc="best")
    path = out / "fan.svg"
    _save(fig, path)
    plt.close(fig)
    return path


def render_control_norms(out: Path) -> Path:
    plt = _pyplot()
    samp = _read_csv(out / "plot_control_samples.csv")
    summ = _read_csv(out / "plot_control_norms.csv")
    modes = sorted({int(r["mode"]) for r in summ})
    fig, axes = plt.subplots(1, len(modes), figsize=(4 * len(modes), 3.5), squeeze=False)
    for ax, i in zip(axes[0], modes):
        pts = [r for r in samp if int(r["mode"]) == i]
        ax.plot(_col(pts, "k"), _col(pts, "norm"), ".", color="0.5", ms=2)
        rows = [r for r in summ if int(r["mode"]) == i]
        k = _col(rows, "k")
        ax.plot(k, _col(rows, "predicted_envelope"), "b--", label="predicted bound")
        ax.plot(k, _col(rows, "u_max"), "r-", label="$u_{max}$")
        ax.set_title(f"mode {i}")
        ax.set_xlabel("k")
        ax.set_ylabel(r"$\|u_k\|$")
        ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    path = out / "control_norms.svg"
    _save(fig, path)
    plt.close(fig)
    return path


def render_terminal(out: Path) -> Path:
    plt = _pyplot()
    pts = _read_csv(out / "plot_terminal.csv")
    ell = _read_csv(out / "plot_ellipses.csv")
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(_col(pts, "x0"), _col(pts, "x1"), ".", color="0.6", ms=2, label="samples at T")
    styles = {"sample": "g-", "predicted": "b--", "constraint": "r-"}
    for name in ("sample", "predicted", "constraint"):
        rows = [r for r in ell if r["ellipse"] == name]
        if rows:
            ax.plot(_col(rows, "x0"), _col(rows, "x1"), styles[name], label=f"{name} (95%)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    ax.legend(loc="best", fontsize="small")
    path = out / "terminal.svg"
    _save(fig, path)
    plt.close(fig)
    return path


def summary_text(out: Path) -> str:
    lines = ["covsteer run summary",
             "Ellipses are scaled to 95% Gaussian mass (chi-square, 2 dof: 5.991)."]
    sol = out / "solution.json"
    if sol.exists():
        d = json.loads(sol.read_text())
        lines += ["", "[solve]",
                  f"status: {d['status']}", f"iterations: {d['iterations']}",
                  f"cost total/mean/cov: {d['cost']['total']:.6g} / {d['cost']['mean']:.6g} / "
                  f"{d['cost']['covariance']:.6g}",
                  f"losslessness residual max: {d['lossless_max']:.3e}",
                  f"terminal mean error: {d['terminal_mean_error']:.3e}",
                  f"lambda_max(Sigma_T - Sigma_f): {d['terminal_cov_excess']:.3e}"]
    mc = out / "mc_report.json"
    if mc.exists():
        d = json.loads(mc.read_text())
        lines += ["", "[montecarlo]", f"samples: {d['num_samples']}  seed: {d['seed']}",
                  f"empirical cost: {d['cost']['mean']} +/- {d['cost']['stderr']}"]
        for key, val in sorted(d.get("violations", {}).get("worst", {}).items()):
            if val is not None:
                lines.append(f"violation {key}: {val}")
        ids = d.get("identities")
        if ids:
            lines.append(f"moment identities passed: {ids['passed']}")
            for c in ids["checks"]:
                lines.append(f"  {c['name']}: max z {c['max_z']}")
    return "\n".join(lines) + "\n"


PLOT_INPUTS = {
    "fan.svg": ("plot_fan.csv", "plot_mean.csv", "plot_constraints.csv"),
    "control_norms.svg": ("plot_control_samples.csv", "plot_control_norms.csv"),
    "terminal.svg": ("plot_terminal.csv", "plot_ellipses.csv"),
}
RENDERERS = {"fan.svg": render_fan, "control_norms.svg": render_control_norms,
             "terminal.svg": render_terminal}


def render_report(out_dir) -> list:
    """Render every figure whose inputs exist plus ``report.txt``.  Raises
    ``FileNotFoundError`` if the directory holds no prior artifacts."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"{out} is not a directory")
    have_any = (out / "solution.json").exists() or (out / "mc_report.json").exists()
    if not have_any:
        raise FileNotFoundError(f"no solve or montecarlo artifacts in {out}")
    written = []
    for name, inputs in PLOT_INPUTS.items():
        if all((out / f).exists() for f in inputs):
            written.append(RENDERERS[name](out))
    txt = out / "report.txt"
    txt.write_text(summary_text(out))
    written.append(txt)
    return written
