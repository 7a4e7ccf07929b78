"""``covsteer`` command line: propagate, solve, montecarlo, report.

Exit codes: 0 success, 2 input error, 3 runtime error, 4 non-convergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .model import ModelError, load_model, validate
from .propagation import (Policy, closed_loop_moments, write_trajectory_csv,
                          write_trajectory_json)

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME, EXIT_NONCONVERGED = 0, 2, 3, 4

log = logging.getLogger("covsteer")


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    model_path: str | None
    options: dict
    out_dir: str
    artifacts: dict = field(default_factory=dict)   # file name -> sha256
    timings: dict = field(default_factory=dict)     # phase -> seconds
    status: str = "ok"
    exit_code: int = EXIT_OK

    def add(self, path) -> None:
        path = Path(path)
        self.artifacts[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def write(self) -> Path:
        path = Path(self.out_dir) / f"manifest_{self.command}.json"
        doc = {"version": __version__, **vars(self)}
        doc["artifacts"] = dict(sorted(self.artifacts.items()))
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


class _Timer:
    def __init__(self, manifest: RunManifest, phase: str):
        self.manifest, self.phase = manifest, phase

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.timings[self.phase] = max(time.perf_counter() - self.t0, 0.0)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _dump(path, obj) -> Path:
    from .montecarlo.report import _jsonable
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")
    return path


def _load_checked(path):
    p = Path(path)
    if not p.exists():
        raise InputError(f"model file not found: {p}")
    try:
        model, cc = load_model(p)
    except ModelError as exc:
        raise InputError(str(exc)) from None
    report = validate(model, cc)
    if not report.ok:
        raise InputError(f"{p}: invalid model: " + "; ".join(report.violations))
    return model, cc


def _load_policy(path) -> Policy:
    p = Path(path)
    if not p.exists():
        raise InputError(f"policy file not found: {p}")
    try:
        return Policy.from_dict(json.loads(p.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{p}: malformed policy ({exc})") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_propagate(args) -> int:
    out = _out_dir(args.out)
    man = RunManifest("propagate", str(args.model), {"policy": str(args.policy) if args.policy else None}, str(out))
    model, _ = _load_checked(args.model)
    policy = _load_policy(args.policy) if args.policy else Policy.zero(model)
    with _Timer(man, "propagate"):
        try:
            from .montecarlo.simulate import check_policy
            check_policy(model, policy)
        except ValueError as exc:
            raise RuntimeError(str(exc)) from None
        tau, xi = closed_loop_moments(model, policy)
    for f in (out / "trajectory.csv", out / "trajectory.json"):
        (write_trajectory_csv if f.suffix == ".csv" else write_trajectory_json)(f, tau, xi)
        man.add(f)
    man.write()
    return EXIT_OK


def _solution_summary(model, sol) -> dict:
    j, jm, jc = sol.cost
    return {
        "status": sol.status, "iterations": sol.iterations,
        "cost": {"total": j, "mean": jm, "covariance": jc},
        "lossless_max": float(np.max(sol.lossless_residual)),
        "certified": sol.certified,
        "terminal_mean_error": float(np.linalg.norm(sol.tau.mu[-1] - model.mu_f)),
        "terminal_cov_excess": float(np.linalg.eigvalsh(sol.xi.sigma[-1] - model.sigma_f).max()),
        "slack_history": [{"iteration": h.iteration, "max_beta": h.max_beta,
                           "max_zeta": h.max_zeta} for h in sol.slack_history],
        "notes": sol.notes,
    }


def cmd_solve(args) -> int:
    from .steering import (Algorithm1Options, SteeringError, run_algorithm1, solve_two_step,
                           write_run_log)

    out = _out_dir(args.out)
    opts = {"tol": args.tol, "alpha": args.alpha, "eta": args.eta, "max_iter": args.max_iter,
            "include_terminal_cc": args.include_terminal_cc}
    man = RunManifest("solve", str(args.model), opts, str(out))
    model, cc = _load_checked(args.model)
    if args.include_terminal_cc is not None and not cc.is_empty:
        from dataclasses import replace
        cc = replace(cc, include_terminal=args.include_terminal_cc)
    try:
        options = Algorithm1Options(tol=args.tol, alpha_init=args.alpha, eta=args.eta,
                                    max_iter=args.max_iter)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    code = EXIT_OK
    with _Timer(man, "solve"):
        try:
            if cc.is_empty:
                sol = solve_two_step(model)
            else:
                sol = run_algorithm1(model, cc, options)
        except SteeringError as exc:
            if exc.partial is None:
                raise RuntimeError(str(exc)) from None
            log.error("%s; writing diagnostics from the last complete iteration", exc)
            sol = exc.partial
            code = EXIT_NONCONVERGED
    if not sol.converged:
        code = EXIT_NONCONVERGED
    with _Timer(man, "write"):
        man.add(_dump(out / "policy.json", sol.policy.to_dict()))
        for f in (out / "trajectory.csv", out / "trajectory.json"):
            (write_trajectory_csv if f.suffix == ".csv" else write_trajectory_json)(
                f, sol.tau, sol.xi)
            man.add(f)
        write_run_log(out / "run_log.jsonl", sol.run_log)
        man.add(out / "run_log.jsonl")
        man.add(_dump(out / "certificate.json", {
            "residual": sol.lossless_residual, "max": float(np.max(sol.lossless_residual)),
            "passed": sol.certified}))
        man.add(_dump(out / "solution.json", _solution_summary(model, sol)))
    man.status = sol.status
    man.exit_code = code
    man.write()
    print(f"{sol.status}: {sol.iterations} iteration(s), cost {sol.cost[0]:.6g}, "
          f"losslessness {np.max(sol.lossless_residual):.2e}")
    return code


def cmd_montecarlo(args) -> int:
    from .montecarlo import SimulationConfig, run_montecarlo, write_samples_csv
    from .montecarlo.simulate import check_policy
    from .plotdata import write_plot_data, write_violation_table

    out = _out_dir(args.out)
    policy_path = Path(args.policy) if args.policy else out / "policy.json"
    opts = {"samples": args.samples, "seed": args.seed, "policy": str(policy_path),
            "noise": args.noise}
    man = RunManifest("montecarlo", str(args.model), opts, str(out))
    model, cc = _load_checked(args.model)
    if args.include_terminal_cc is not None and not cc.is_empty:
        from dataclasses import replace
        cc = replace(cc, include_terminal=args.include_terminal_cc)
    policy = _load_policy(policy_path)
    try:
        check_policy(model, policy)
        config = SimulationConfig(args.samples, args.seed, args.noise)
    except ValueError as exc:
        raise RuntimeError(str(exc)) from None
    with _Timer(man, "analytic"):
        tau, xi = closed_loop_moments(model, policy)
    with _Timer(man, "simulate"):
        samples, report = run_montecarlo(model, policy, config, cc, tau, xi)
    with _Timer(man, "write"):
        report.write(out / "mc_report.json")
        man.add(out / "mc_report.json")
        if report.violations is not None:
            man.add(write_violation_table(out / "violations.csv", report.violations))
        for p in write_plot_data(out, model, cc, samples, tau, xi).values():
            man.add(p)
        if args.raw_csv:
            write_samples_csv(samples, out / "samples.csv")
            man.add(out / "samples.csv")
    man.write()
    worst = report.violations.worst() if report.violations is not None else {}
    print(f"{report.num_samples} samples; worst violation rates: "
          + ", ".join(f"{k}={v:.4g}" for k, v in sorted(worst.items()) if v is not None))
    return EXIT_OK


def cmd_report(args) -> int:
    from .render import render_report

    out = Path(args.out)
    man = RunManifest("report", None, {}, str(out))
    with _Timer(man, "render"):
        try:
            files = render_report(out)
        except FileNotFoundError as exc:
            raise InputError(str(exc)) from None
    for f in files:
        man.add(f)
    man.write()
    print((out / "report.txt").read_text(), end="")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covsteer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"covsteer {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        if model:
            sp.add_argument("--model", required=True, type=Path, help="model JSON file")
        sp.add_argument("--out", required=True, type=Path, help="output directory")

    sp = sub.add_parser("propagate", help="exact moments under a policy (default zero)")
    common(sp)
    sp.add_argument("--policy", type=Path, help="policy JSON (default: zero policy)")
    sp.set_defaults(func=cmd_propagate)

    sp = sub.add_parser("solve", help="synthesize a steering policy")
    common(sp)
    sp.add_argument("--tol", type=float, default=1e-6, help="slack tolerance")
    sp.add_argument("--alpha", type=float, default=1e2, help="initial slack weight")
    sp.add_argument("--eta", type=float, default=1.5, help="slack weight growth factor")
    sp.add_argument("--max-iter", type=int, default=50)
    sp.add_argument("--include-terminal-cc", type=_bool, default=None, metavar="BOOL",
                    help="also impose state chance constraints at k = T")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("montecarlo", help="sample the closed loop under a policy")
    common(sp)
    sp.add_argument("--policy", type=Path, help="policy JSON (default: OUT/policy.json)")
    sp.add_argument("--samples", type=int, default=2500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", choices=("gaussian", "uniform"), default="gaussian")
    sp.add_argument("--include-terminal-cc", type=_bool, default=None, metavar="BOOL")
    sp.add_argument("--raw-csv", action="store_true", help="also write every sample")
    sp.set_defaults(func=cmd_montecarlo)

    sp = sub.add_parser("report", help="render SVG figures and a text summary")
    common(sp, model=False)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # runtime failures map to a stable exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
