"""Distribution-free deterministic surrogates for the chance constraints.

Half-planes use the one-sided Chebyshev (Cantelli) bound, norm balls the
multivariate Chebyshev bound. Both only need a mean and a covariance, which is
what makes them usable on the Gaussian mixtures an MJLS produces.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..model import ChanceConstraintSet


def _check_risk(eps):
    eps = np.asarray(eps, dtype=float)
    if np.any((eps <= 0) | (eps >= 1)):
        raise ValueError(f"risk level must lie in (0, 1), got {eps}")


def cantelli_factor(eps) -> np.ndarray:
    """sqrt((1 - eps) / eps)."""
    _check_risk(eps)
    eps = np.asarray(eps, dtype=float)
    return np.sqrt((1.0 - eps) / eps)


def chebyshev_factor(n: int, eps) -> np.ndarray:
    """sqrt(n / eps)."""
    _check_risk(eps)
    return np.sqrt(n / np.asarray(eps, dtype=float))


def tighten_halfplane(v_mean, v_cov, a, b, eps) -> float:
    """``a.v_mean + b + sqrt((1-eps)/eps * a' V a)``; the chance constraint
    ``P(a.v + b <= 0) >= 1 - eps`` holds whenever this is ``<= 0``."""
    a = np.asarray(a, dtype=float)
    var = max(float(a @ np.asarray(v_cov, dtype=float) @ a), 0.0)
    return float(a @ np.asarray(v_mean, dtype=float) + b + cantelli_factor(eps) * np.sqrt(var))


def tighten_norm(v_mean, v_cov, v_max, eps, n_v: Optional[int] = None) -> float:
    """``||v_mean|| + sqrt(n/eps * lambda_max(V)) - v_max``; ``<= 0`` implies
    ``P(||v|| <= v_max) >= 1 - eps``."""
    if v_max <= 0:
        raise ValueError("v_max must be positive")
    v_mean = np.asarray(v_mean, dtype=float)
    n_v = v_mean.size if n_v is None else n_v
    lam = max(float(np.linalg.eigvalsh(np.asarray(v_cov, dtype=float)).max()), 0.0)
    return float(np.linalg.norm(v_mean) + chebyshev_factor(n_v, eps) * np.sqrt(lam) - v_max)


@dataclass(frozen=True)
class TighteningCoefficients:
    state_risk: np.ndarray       # (J_x,)
    state_kappa: np.ndarray      # (J_x,)
    control_risk: np.ndarray     # (N, J_u)
    control_kappa: np.ndarray    # (N, J_u)
    tube_factor: Optional[float]         # n_x / eps_x
    norm_factor: Optional[np.ndarray]    # (N,) n_u / eps_u(i)


def allocate_risk(cc: ChanceConstraintSet, n_x: int, n_u: int, num_modes: int,
                  strategy: str = "uniform") -> TighteningCoefficients:
    """Split each joint risk budget across its half-planes.

    ``uniform`` gives every half-plane ``budget / count``; ``given`` uses the
    split stored on the constraint set.
    """
    if strategy not in ("uniform", "given"):
        raise ValueError(f"unknown risk allocation strategy {strategy!r}")
    jx, ju = len(cc.state_halfplanes), len(cc.control_halfplanes)
    if strategy == "given" and cc.state_split is not None:
        dx = np.asarray(cc.state_split, dtype=float)
    else:
        dx = np.full(jx, cc.state_risk / jx) if jx else np.zeros(0)
    if ju:
        budget = np.broadcast_to(np.asarray(cc.control_risk, dtype=float), (num_modes,))
        if strategy == "given" and cc.control_split is not None:
            du = np.atleast_2d(np.asarray(cc.control_split, dtype=float))
        else:
            du = np.repeat((budget / ju)[:, None], ju, axis=1)
    else:
        du = np.zeros((num_modes, 0))
    tube = None
    if cc.state_tube is not None:
        _check_risk(cc.state_tube.risk)
        tube = n_x / cc.state_tube.risk
    norm = None
    if cc.control_norm is not None:
        _check_risk(cc.control_norm.risk)
        norm = n_u / np.broadcast_to(cc.control_norm.risk, (num_modes,)).astype(float)
    return TighteningCoefficients(
        state_risk=dx, state_kappa=cantelli_factor(dx) if jx else np.zeros(0),
        control_risk=du, control_kappa=cantelli_factor(du) if ju else du.copy(),
        tube_factor=tube, norm_factor=norm,
    )
