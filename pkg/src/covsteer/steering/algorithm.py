"""Two-step (mean, then covariance) steering and the slack-penalized
alternating loop for the chance-constrained problem."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..conic import SolveResult, SolveSettings, solve
from ..model import ChanceConstraintSet, MjlsModel
from ..propagation import (CovarianceTrajectory, MeanTrajectory, Policy, evaluate_cost,
                           extract_policy)
from .subproblems import (build_cov_cc, build_cov_unconstrained, build_mean_cc,
                          build_mean_unconstrained, cov_from_values, default_weights,
                          mean_from_values, slack_values)
from .tightening import allocate_risk

log = logging.getLogger(__name__)

LOSSLESS_TOL = 1e-5


class SteeringError(RuntimeError):
    """A subproblem did not solve. ``partial`` holds the last consistent
    iterate and slack history when the failure happened inside the loop."""

    def __init__(self, stage: str, result: SolveResult):
        self.stage, self.result = stage, result
        self.partial: Optional["SteeringSolution"] = None
        super().__init__(f"{stage} subproblem returned {result.status} "
                         f"({result.stats.get('solver_status', '')})")


def certify_losslessness(xi: CovarianceTrajectory) -> np.ndarray:
    """Per-(k, i) relative gap ``||L S^-1 L^T - Y||_F / (1 + ||Y||_F)``.

    Singular ``S`` yields ``inf`` for that entry.
    """
    T, N = xi.l.shape[:2]
    out = np.empty((T, N))
    for k in range(T):
        for i in range(N):
            s, l, y = xi.s[k, i], xi.l[k, i], xi.y[k, i]
            if np.linalg.eigvalsh(s).min() <= 1e-10:
                out[k, i] = np.inf
                continue
            lsl = l @ np.linalg.solve(s, l.T)
            out[k, i] = np.linalg.norm(lsl - y) / (1.0 + np.linalg.norm(y))
    return out


@dataclass
class SlackReport:
    iteration: int
    beta: dict
    zeta: dict
    weights: dict

    @staticmethod
    def _inf(d):
        return max((float(np.max(np.abs(v), initial=0.0)) for v in d.values()), default=0.0)

    @property
    def max_beta(self) -> float:
        return self._inf(self.beta)

    @property
    def max_zeta(self) -> float:
        return self._inf(self.zeta)

    @property
    def max_slack(self) -> float:
        return max(self.max_beta, self.max_zeta)


@dataclass
class SteeringSolution:
    tau: MeanTrajectory
    xi: CovarianceTrajectory
    policy: Policy
    cost: tuple                      # (J_total, J_mean, J_cov)
    lossless_residual: np.ndarray    # (T, N)
    status: str                      # optimal | converged | max_iter
    iterations: int = 1
    slack_history: list = field(default_factory=list)
    run_log: list = field(default_factory=list)
    solver_stats: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return bool(np.max(self.lossless_residual) <= LOSSLESS_TOL)

    @property
    def converged(self) -> bool:
        return self.status in ("optimal", "converged")


def _solve_stage(prog, stage, settings, backend, retry: bool) -> SolveResult:
    res = solve(prog, settings, backend)
    if res.status == "numerical_trouble" and retry:
        log.warning("%s: numerical trouble, retrying with relaxed tolerances", stage)
        res = solve(prog, settings.relaxed(10.0), backend)
        res.stats["retried"] = True
    if not res.ok:
        raise SteeringError(stage, res)
    return res


def _stat_summary(res: SolveResult) -> dict:
    keep = ("backend", "iterations", "solver_status", "primal_residual", "gap", "retried")
    return {k: res.stats[k] for k in keep if k in res.stats}


def solve_two_step(model: MjlsModel, settings: Optional[SolveSettings] = None,
                   backend=None) -> SteeringSolution:
    """Unconstrained pipeline: mean subproblem, then covariance subproblem on
    the optimal mean trajectory."""
    settings = settings or SolveSettings()
    res_m = _solve_stage(build_mean_unconstrained(model), "mean", settings, backend, False)
    tau = mean_from_values(model, res_m.values)
    res_c = _solve_stage(build_cov_unconstrained(model, tau), "covariance", settings, backend,
                         False)
    xi = cov_from_values(model, tau, res_c.values)
    return SteeringSolution(
        tau=tau, xi=xi, policy=extract_policy(xi, tau), cost=evaluate_cost(tau, xi, model),
        lossless_residual=certify_losslessness(xi), status="optimal", iterations=1,
        solver_stats=[_stat_summary(res_m), _stat_summary(res_c)],
    )


@dataclass
class Algorithm1Options:
    tol: float = 1e-6
    alpha_init: float = 1e2
    eta: float = 1.5
    max_iter: int = 50
    per_family_escalation: bool = False
    risk_strategy: str = "uniform"
    # re-solve the covariance subproblem on the final mean trajectory so the
    # extracted policy reproduces the returned moments
    final_covariance_pass: bool = True

    def __post_init__(self):
        if self.tol <= 0 or self.alpha_init <= 0 or self.max_iter < 1:
            raise ValueError("tol, alpha_init and max_iter must be positive")
        if self.eta <= 1:
            raise ValueError("eta must exceed 1")


def run_algorithm1(model: MjlsModel, cc: ChanceConstraintSet,
                   options: Optional[Algorithm1Options] = None,
                   settings: Optional[SolveSettings] = None, backend=None,
                   on_iteration: Optional[Callable[[dict], None]] = None) -> SteeringSolution:
    """Alternate covariance and mean subproblems with slack penalties,
    escalating the penalty weights by ``eta`` until every slack is below
    ``tol``.

    Returns the last ``(tau, xi)`` pair; ``status`` is ``converged`` or
    ``max_iter``.
    """
    options = options or Algorithm1Options()
    settings = settings or SolveSettings()
    if cc is None or cc.is_empty:
        sol = solve_two_step(model, settings, backend)
        sol.status = "converged"
        return sol

    coeffs = allocate_risk(cc, model.n_x, model.n_u, model.num_modes, options.risk_strategy)
    weights = default_weights(options.alpha_init)
    res = _solve_stage(build_mean_unconstrained(model), "mean (initial)", settings, backend, True)
    tau = mean_from_values(model, res.values)
    stats = [_stat_summary(res)]
    history, run_log, notes = [], [], []
    status = "max_iter"
    t_start = time.perf_counter()
    for it in range(1, options.max_iter + 1):
        iter_notes: list = []
        try:
            res_c = _solve_stage(build_cov_cc(model, cc, tau, weights, coeffs, iter_notes),
                                 f"covariance (iteration {it})", settings, backend, True)
            xi_new = cov_from_values(model, tau, res_c.values)
            res_m = _solve_stage(build_mean_cc(model, cc, xi_new, weights, coeffs),
                                 f"mean (iteration {it})", settings, backend, True)
        except SteeringError as exc:
            if history:
                exc.partial = _package(model, last_pair[0], last_pair[1], "subproblem_failed",
                                       it - 1, history, run_log, stats, notes + [str(exc)])
            raise
        xi = xi_new
        tau_new = mean_from_values(model, res_m.values)
        report = SlackReport(it, slack_values(res_m.values, "beta"),
                             slack_values(res_c.values, "zeta"), dict(weights))
        history.append(report)
        stats += [_stat_summary(res_c), _stat_summary(res_m)]
        lossless = certify_losslessness(xi)
        entry = {
            "iteration": it,
            "alpha": dict(weights),
            "beta_inf": {f: float(np.max(v)) for f, v in report.beta.items()},
            "zeta_inf": {f: float(np.max(v)) for f, v in report.zeta.items()},
            "cov_objective": res_c.objective,
            "mean_objective": res_m.objective,
            "cov_solver": _stat_summary(res_c),
            "mean_solver": _stat_summary(res_m),
            "lossless_max": float(np.max(lossless)),
            "mean_shift": float(np.max(np.abs(tau_new.q - tau.q))),
            "notes": sorted(set(iter_notes)),
        }
        run_log.append(entry)
        notes.extend(iter_notes)
        if on_iteration is not None:
            on_iteration(entry)
        log.info("iteration %d: max beta %.3e, max zeta %.3e", it, report.max_beta,
                 report.max_zeta)
        last_pair = (tau, xi)
        tau = tau_new
        if report.max_slack > options.tol:
            if options.per_family_escalation:
                for fam in set(report.beta) | set(report.zeta):
                    worst = max(float(np.max(report.beta.get(fam, 0.0))),
                                float(np.max(report.zeta.get(fam, 0.0))))
                    if worst > options.tol:
                        weights[fam] *= options.eta
            else:
                weights = {f: w * options.eta for f, w in weights.items()}
        else:
            status = "converged"
            break
    log.info("alternating loop finished after %d iterations in %.2fs (%s)", it,
             time.perf_counter() - t_start, status)
    if status == "converged" and options.final_covariance_pass:
        xi, extra = _final_covariance_pass(model, cc, tau, xi, weights, coeffs, settings,
                                           backend, options.tol)
        if extra is not None:
            stats.append(extra)
            run_log.append({"final_covariance_pass": extra})
        else:
            notes.append("final covariance pass rejected; returning loop iterate")
    return _package(model, tau, xi, status, it, history, run_log, stats, notes)


def _package(model, tau, xi, status, iterations, history, run_log, stats, notes):
    return SteeringSolution(
        tau=tau, xi=xi, policy=extract_policy(xi, tau), cost=evaluate_cost(tau, xi, model),
        lossless_residual=certify_losslessness(xi), status=status, iterations=iterations,
        slack_history=history, run_log=run_log, solver_stats=stats,
        notes=sorted(set(notes)),
    )


def _final_covariance_pass(model, cc, tau, xi, weights, coeffs, settings, backend, tol):
    """Covariance subproblem on the final mean trajectory.

    Accepted only if its slacks stay within ``tol``; otherwise the loop
    iterate is kept.
    """
    try:
        res = _solve_stage(build_cov_cc(model, cc, tau, weights, coeffs, []),
                           "covariance (final pass)", settings, backend, True)
    except SteeringError as exc:
        log.warning("final covariance pass failed: %s", exc)
        return xi, None
    zeta = slack_values(res.values, "zeta")
    worst = SlackReport(0, {}, zeta, {}).max_zeta
    if worst > tol:
        log.warning("final covariance pass leaves slack %.2e; keeping loop iterate", worst)
        return xi, None
    out = _stat_summary(res)
    out["max_zeta"] = worst
    return cov_from_values(model, tau, res.values), out


def write_run_log(path, entries) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
