"""Numeric plot data (CSV) for the state fan, control-norm history and
terminal scatter.  These files are the numeric record; the SVGs are drawn
from them and carry no extra information."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ChanceConstraintSet, MjlsModel
from .montecarlo.simulate import Samples
from .propagation import CovarianceTrajectory, MeanTrajectory

# chi-square quantile, 2 dof, 95%: the unit ellipse scaled by sqrt(5.991)
# contains 95% of a planar Gaussian
CHI2_2DOF_95 = 5.991464547107979
ELLIPSE_POINTS = 121
MAX_TRAJECTORIES = 200
MAX_SCATTER = 5000


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    return repr(float(v))


def _write(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def ellipse_points(center, cov, scale2: float = CHI2_2DOF_95, n: int = ELLIPSE_POINTS):
    """Boundary of ``{x : (x-c)^T cov^-1 (x-c) <= scale2}`` in the first two
    coordinates."""
    c = np.asarray(center, dtype=float)[:2]
    cov = np.asarray(cov, dtype=float)[:2, :2]
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.clip(w, 0.0, None)
    t = np.linspace(0.0, 2.0 * np.pi, n)
    circle = np.stack([np.cos(t), np.sin(t)])
    return (c[:, None] + np.sqrt(scale2) * (v * np.sqrt(w)) @ circle).T


def control_envelope(tau: MeanTrajectory, xi: CovarianceTrajectory,
                     cc: Optional[ChanceConstraintSet], n_u: int) -> Optional[np.ndarray]:
    """Predicted bound ``||ubar_k(i)|| + sqrt(n_u / eps_u(i) * lambda_max(Y_k(i)))``."""
    if cc is None or cc.control_norm is None:
        return None
    N = tau.ubar.shape[1]
    eps = np.broadcast_to(np.asarray(cc.control_norm.risk, dtype=float), (N,))
    lam = np.clip(np.linalg.eigvalsh(xi.y)[..., -1], 0.0, None)
    return np.linalg.norm(tau.ubar, axis=2) + np.sqrt(n_u / eps[None, :] * lam)


def write_plot_data(out_dir, model: MjlsModel, cc: Optional[ChanceConstraintSet],
                    samples: Samples, tau: MeanTrajectory, xi: CovarianceTrajectory) -> dict:
    """Write every plot-data CSV; returns ``{name: path}``."""
    out = Path(out_dir)
    files = {}
    M = samples.num_samples
    T = model.horizon
    n_show = min(M, MAX_TRAJECTORIES)

    rows = []
    for s in range(n_show):
        for k in range(T + 1):
            rows.append([s, k, int(samples.r[s, k])] + [_fmt(v) for v in samples.x[s, k, :2]])
    files["fan"] = _write(out / "plot_fan.csv", ["sample", "k", "mode", "x0", "x1"], rows)

    emp_mu = samples.x.mean(axis=0)
    rows = [[k] + [_fmt(v) for v in tau.mu[k, :2]] + [_fmt(v) for v in emp_mu[k, :2]]
            for k in range(T + 1)]
    files["mean"] = _write(out / "plot_mean.csv",
                           ["k", "mu0", "mu1", "sample_mu0", "sample_mu1"], rows)

    rows = []
    if cc is not None:
        for j, h in enumerate(cc.state_halfplanes):
            rows.append(["state_halfplane", j] + [_fmt(v) for v in h.normal[:2]]
                        + [_fmt(h.offset)])
    files["constraints"] = _write(out / "plot_constraints.csv",
                                  ["kind", "index", "a0", "a1", "b"], rows)

    norms = np.linalg.norm(samples.u, axis=2)
    rows = [[s, k, int(samples.r[s, k]), _fmt(norms[s, k])]
            for s in range(n_show) for k in range(T)]
    files["control_samples"] = _write(out / "plot_control_samples.csv",
                                      ["sample", "k", "mode", "norm"], rows)

    env = control_envelope(tau, xi, cc, model.n_u)
    u_max = (np.broadcast_to(np.asarray(cc.control_norm.u_max, dtype=float), (model.num_modes,))
             if cc is not None and cc.control_norm is not None else None)
    rows = []
    for k in range(T):
        for i in range(model.num_modes):
            v = norms[samples.r[:, k] == i, k]
            rows.append([k, i, v.size,
                         _fmt(v.mean() if v.size else None),
                         _fmt(np.quantile(v, 0.95) if v.size else None),
                         _fmt(v.max() if v.size else None),
                         _fmt(np.linalg.norm(tau.ubar[k, i])),
                         _fmt(env[k, i] if env is not None else None),
                         _fmt(u_max[i] if u_max is not None else None)])
    files["control_norms"] = _write(
        out / "plot_control_norms.csv",
        ["k", "mode", "count", "mean", "q95", "max", "ubar_norm", "predicted_envelope", "u_max"],
        rows)

    xT = samples.x[: min(M, MAX_SCATTER), T]
    rows = [[s] + [_fmt(v) for v in xT[s, :2]] for s in range(xT.shape[0])]
    files["terminal"] = _write(out / "plot_terminal.csv", ["sample", "x0", "x1"], rows)

    rows = []
    if M > 1:
        xs = samples.x[:, T]
        sets = [("sample", xs.mean(axis=0), np.cov(xs.T))]
    else:
        sets = []
    sets += [("predicted", tau.mu[T], xi.sigma[T]), ("constraint", model.mu_f, model.sigma_f)]
    for name, c, cov in sets:
        for n, p in enumerate(ellipse_points(c, cov)):
            rows.append([name, n, _fmt(p[0]), _fmt(p[1])])
    files["ellipses"] = _write(out / "plot_ellipses.csv", ["ellipse", "point", "x0", "x1"], rows)
    return files


def write_violation_table(path, report) -> Path:
    """Per-step violation table from a :class:`ViolationReport`."""
    rows = []
    T = report.mode_counts.shape[0]
    for n, k in enumerate(report.state_steps):
        row = [k, _fmt(report.state_any_per_step[n]) if report.state_any_per_step.size else "",
               _fmt(report.tube_per_step[n]) if report.tube_per_step is not None else ""]
        if k < T and report.control_norm_per_step is not None:
            row.append(_fmt(report.control_norm_per_step[k]))
            row.append(_fmt(np.nanmax(report.control_norm_per_mode[k])))
        else:
            row += ["", ""]
        if k < T and report.control_halfplane_per_mode is not None:
            row.append(_fmt(np.nanmax(report.control_halfplane_per_mode[k], initial=0.0)))
        else:
            row.append("")
        rows.append(row)
    return _write(path, ["k", "state_halfplane", "state_tube", "control_norm",
                         "control_norm_worst_mode", "control_halfplane_worst_mode"], rows)
