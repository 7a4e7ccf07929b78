"""Monte Carlo report assembly and JSON serialization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..model import ChanceConstraintSet, MjlsModel
from ..propagation import CovarianceTrajectory, MeanTrajectory, Policy
from .simulate import Samples, SimulationConfig, sample_trajectories
from .statistics import (IdentityReport, MomentReport, ViolationReport, control_norm_summary,
                         empirical_cost, estimate_moments, estimate_violations, mode_path_check,
                         verify_identities)


@dataclass
class McReport:
    num_samples: int
    seed: int
    noise_model: str
    moments: MomentReport
    violations: Optional[ViolationReport]
    control_norms: dict
    cost_mean: float
    cost_stderr: float
    identities: Optional[IdentityReport] = None
    mode_paths: Optional[dict] = None

    @property
    def mode_counts(self) -> np.ndarray:
        return self.moments.counts

    def to_dict(self) -> dict:
        m = self.moments
        d = {
            "num_samples": self.num_samples,
            "seed": self.seed,
            "noise_model": self.noise_model,
            "mode_counts": m.counts,
            "insufficient_buckets": m.insufficient,
            "moments": {
                "centered_on": m.centered_on,
                **{name: {"value": est.value, "stderr": est.stderr}
                   for name, est in (("rho", m.rho), ("q", m.q), ("S", m.s), ("mu", m.mu),
                                     ("Sigma", m.sigma))},
            },
            "control_norms": self.control_norms,
            "cost": {"mean": self.cost_mean, "stderr": self.cost_stderr},
        }
        if self.violations is not None:
            v = self.violations
            d["violations"] = {
                "state_steps": v.state_steps,
                "state_halfplane_per_step": v.state_halfplane_per_step,
                "state_any_per_step": v.state_any_per_step,
                "state_trajectory": v.state_trajectory,
                "tube_per_step": v.tube_per_step,
                "tube_trajectory": v.tube_trajectory,
                "control_halfplane_per_mode": v.control_halfplane_per_mode,
                "control_norm_per_step": v.control_norm_per_step,
                "control_norm_per_mode": v.control_norm_per_mode,
                "control_norm_trajectory": v.control_norm_trajectory,
                "worst": v.worst(),
            }
        if self.identities is not None:
            d["identities"] = {
                "passed": self.identities.passed, "z_max": self.identities.z_max,
                "checks": [vars(c) for c in self.identities.checks],
            }
        if self.mode_paths is not None:
            d["mode_paths"] = self.mode_paths
        return _jsonable(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def _jsonable(obj):
    """numpy -> plain Python; NaN and inf become ``None``."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def run_montecarlo(model: MjlsModel, policy: Policy, config: SimulationConfig,
                   cc: Optional[ChanceConstraintSet] = None,
                   tau: Optional[MeanTrajectory] = None,
                   xi: Optional[CovarianceTrajectory] = None):
    """Sample, then summarize.  Identity checks run when both ``tau`` and
    ``xi`` are supplied.  Returns ``(samples, report)``."""
    samples: Samples = sample_trajectories(model, policy, config)
    moments = estimate_moments(samples, model.num_modes, tau, use_numba=config.use_numba)
    violations = None
    if cc is not None and not cc.is_empty:
        violations = estimate_violations(samples, model, cc, tau)
    cost = empirical_cost(samples, model)
    identities = None
    if tau is not None and xi is not None:
        identities = verify_identities(samples, model, policy, xi, tau,
                                       use_numba=config.use_numba)
    paths = mode_path_check(samples, model.chain) if model.horizon <= 12 else None
    report = McReport(
        num_samples=samples.num_samples, seed=samples.seed, noise_model=samples.noise_model,
        moments=moments, violations=violations,
        control_norms=control_norm_summary(samples, model.num_modes),
        cost_mean=float(cost.value), cost_stderr=float(cost.stderr),
        identities=identities, mode_paths=paths,
    )
    return samples, report
