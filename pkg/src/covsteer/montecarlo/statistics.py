"""Empirical moments, constraint violation rates and moment-identity checks
computed from sampled trajectories."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..model import ChanceConstraintSet, MarkovChain, MjlsModel
from ..propagation import CovarianceTrajectory, MeanTrajectory, Policy
from . import _kernels
from .simulate import Samples

MIN_BUCKET = 30


@dataclass
class Estimate:
    value: np.ndarray
    stderr: np.ndarray

    def zscore(self, expected) -> np.ndarray:
        return _zscore(self.value, self.stderr, np.asarray(expected, dtype=float))


def _zscore(value, se, expected):
    diff = np.abs(value - expected)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / se
    exact = diff <= 1e-12 * (1.0 + np.abs(expected))
    z = np.where(se > 0, z, np.where(exact, 0.0, np.inf))
    return np.where(np.isnan(value) | np.isnan(se), np.nan, z)


def _unconditional(s1, s2, M):
    """Mean and standard error of ``f 1{r=i}`` over all ``M`` samples."""
    mean = s1 / M
    if M < 2:
        return mean, np.full_like(mean, np.nan)
    var = np.maximum(s2 - M * mean ** 2, 0.0) / (M - 1)
    return mean, np.sqrt(var / M)


def _conditional(s1, s2, count):
    """Mean and standard error of ``f`` within each mode bucket."""
    n = count[..., None].astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(n > 0, s1 / n, np.nan)
        var = np.where(n > 1, np.maximum(s2 - n * mean ** 2, 0.0) / (n - 1), np.nan)
        se = np.sqrt(var / n)
    return mean, se


def _outer_flat(a, b):
    """Per-row flattened outer products, ``(..., p) x (..., q) -> (..., p*q)``."""
    o = a[..., :, None] * b[..., None, :]
    return o.reshape(*o.shape[:-2], -1)


@dataclass
class MomentReport:
    counts: np.ndarray           # (T+1, N)
    rho: Estimate                # (T+1, N)
    q: Estimate                  # (T+1, N, n_x)
    s: Estimate                  # (T+1, N, n_x, n_x)
    mu: Estimate                 # (T+1, n_x)
    sigma: Estimate              # (T+1, n_x, n_x)
    insufficient: np.ndarray     # (T+1, N) bucket below the minimum size
    centered_on: str             # "analytic" | "empirical"


def estimate_moments(samples: Samples, num_modes: int,
                     reference: Optional[MeanTrajectory] = None,
                     min_bucket: int = MIN_BUCKET, use_numba=None) -> MomentReport:
    """Partial moments ``E[x 1{r=i}]``, ``E[(x - xbar)(x - xbar)^T 1{r=i}]``
    and total ``mu``, ``Sigma`` with standard errors.

    With ``reference`` the centering uses the analytic ``xbar`` and ``mu``
    (which makes every estimator unbiased); otherwise the empirical ones.
    Fewer than two samples give NaN standard errors.
    """
    x, r = samples.x, samples.r
    M, K, n_x = x.shape
    N = num_modes
    count, s1, s2 = _kernels.bucket_sums(x, r, N, use_numba)
    q_val, q_se = _unconditional(s1, s2, M)
    rho_val = count / M
    rho_se = (np.sqrt(rho_val * (1 - rho_val) / (M - 1)) if M > 1
              else np.full_like(rho_val, np.nan))

    if reference is not None:
        xbar, mu_ref, centered = reference.xbar, reference.mu, "analytic"
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            xbar = np.where(count[..., None] > 0, q_val / rho_val[..., None], 0.0)
        mu_ref, centered = q_val.sum(axis=1), "empirical"

    dev = x - xbar[np.arange(K)[None, :], r]
    _, t1, t2 = _kernels.bucket_sums(_outer_flat(dev, dev), r, N, use_numba)
    s_val, s_se = _unconditional(t1, t2, M)

    dmu = x - mu_ref[None]
    zeros = np.zeros_like(r)
    _, m1, m2 = _kernels.bucket_sums(x, zeros, 1, use_numba)
    mu_val, mu_se = _unconditional(m1[:, 0], m2[:, 0], M)
    _, c1, c2 = _kernels.bucket_sums(_outer_flat(dmu, dmu), zeros, 1, use_numba)
    sig_val, sig_se = _unconditional(c1[:, 0], c2[:, 0], M)
    if reference is None and M > 1:
        # unbiased sample covariance when centred on the sample mean
        sig_val = sig_val * M / (M - 1)

    shape_s = (K, N, n_x, n_x)
    return MomentReport(
        counts=count, rho=Estimate(rho_val, rho_se), q=Estimate(q_val, q_se),
        s=Estimate(s_val.reshape(shape_s), s_se.reshape(shape_s)),
        mu=Estimate(mu_val, mu_se),
        sigma=Estimate(sig_val.reshape(K, n_x, n_x), sig_se.reshape(K, n_x, n_x)),
        insufficient=count < max(min_bucket, 2), centered_on=centered,
    )


# ------------------------------------------------------------- violations

@dataclass
class ViolationReport:
    state_steps: list
    state_halfplane_per_step: np.ndarray     # (K, J_x) per half-plane
    state_any_per_step: np.ndarray           # (K,) any half-plane
    state_trajectory: float                  # any step, any half-plane
    tube_per_step: Optional[np.ndarray]      # (K,)
    tube_trajectory: Optional[float]
    control_halfplane_per_mode: Optional[np.ndarray]   # (T, N, J_u), within mode
    control_norm_per_step: Optional[np.ndarray]        # (T,)
    control_norm_per_mode: Optional[np.ndarray]        # (T, N), within mode
    control_norm_trajectory: Optional[float]
    mode_counts: np.ndarray                            # (T, N)

    def worst(self) -> dict:
        def m(v):
            return None if v is None or np.size(v) == 0 else float(np.nanmax(v))
        return {"state_trajectory": self.state_trajectory if self.state_any_per_step.size else None,
                "state_per_step": m(self.state_any_per_step),
                "tube_trajectory": self.tube_trajectory,
                "control_halfplane_per_mode": m(self.control_halfplane_per_mode),
                "control_norm_per_step": m(self.control_norm_per_step),
                "control_norm_per_mode": m(self.control_norm_per_mode),
                "control_norm_trajectory": self.control_norm_trajectory}


def _within_mode_rate(flags, r, N):
    """flags (M, T, ...) boolean -> rate among samples in mode i at step k."""
    T = flags.shape[1]
    out = np.full((T, N) + flags.shape[2:], np.nan)
    counts = np.zeros((T, N), dtype=np.int64)
    for i in range(N):
        mask = r[:, :T] == i
        counts[:, i] = mask.sum(axis=0)
        hit = (flags & mask.reshape(mask.shape + (1,) * (flags.ndim - 2))).sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            sel = counts[:, i] > 0
            out[sel, i] = hit[sel] / counts[sel, i].reshape((-1,) + (1,) * (flags.ndim - 2))
    return out, counts


def estimate_violations(samples: Samples, model: MjlsModel, cc: ChanceConstraintSet,
                        reference: Optional[MeanTrajectory] = None) -> ViolationReport:
    """Violation rates of each chance constraint.

    State constraints are counted per step and trajectory-wise (any step);
    control constraints per step and within each mode.  The tube is
    measured around ``reference.mu`` when given, else the sample mean.
    """
    if cc is None or cc.is_empty:
        raise ValueError("no chance constraints to evaluate")
    x, r, u = samples.x, samples.r, samples.u
    T, N = model.horizon, model.num_modes
    steps = list(range(T + 1 if cc.include_terminal else T))
    xs = x[:, steps]
    if cc.state_halfplanes:
        normals = np.array([h.normal for h in cc.state_halfplanes])
        offsets = np.array([h.offset for h in cc.state_halfplanes])
        viol = np.einsum("mkc,jc->mkj", xs, normals) + offsets > 0
        per_hp = viol.mean(axis=0)
        any_step = viol.any(axis=2)
        state_traj = float(any_step.any(axis=1).mean())
        state_any = any_step.mean(axis=0)
    else:
        per_hp, state_any, state_traj = np.zeros((len(steps), 0)), np.zeros(0), 0.0

    tube_step = tube_traj = None
    if cc.state_tube is not None:
        centre = (reference.mu[steps] if reference is not None else xs.mean(axis=0))
        out = np.linalg.norm(xs - centre[None], axis=2) > cc.state_tube.d_max
        tube_step, tube_traj = out.mean(axis=0), float(out.any(axis=1).mean())

    ctrl_hp = None
    if cc.control_halfplanes:
        f = np.array([h.normal for h in cc.control_halfplanes])
        g = np.array([h.offset for h in cc.control_halfplanes])
        ctrl_hp, _ = _within_mode_rate(np.einsum("mkc,jc->mkj", u, f) + g > 0, r, N)

    norm_step = norm_mode = norm_traj = None
    if cc.control_norm is not None:
        u_max = np.broadcast_to(np.asarray(cc.control_norm.u_max, dtype=float), (N,))
        over = np.linalg.norm(u, axis=2) > u_max[r[:, :T]]
        norm_step = over.mean(axis=0)
        norm_traj = float(over.any(axis=1).mean())
        norm_mode, _ = _within_mode_rate(over, r, N)

    counts = np.stack([(r[:, :T] == i).sum(axis=0) for i in range(N)], axis=1)
    return ViolationReport(
        state_steps=steps, state_halfplane_per_step=per_hp, state_any_per_step=state_any,
        state_trajectory=state_traj, tube_per_step=tube_step, tube_trajectory=tube_traj,
        control_halfplane_per_mode=ctrl_hp, control_norm_per_step=norm_step,
        control_norm_per_mode=norm_mode, control_norm_trajectory=norm_traj,
        mode_counts=counts,
    )


def control_norm_summary(samples: Samples, num_modes: int) -> dict:
    """Per (k, i): count, mean, 95th percentile and max of ``||u||``."""
    T = samples.horizon
    norms = np.linalg.norm(samples.u, axis=2)
    out = {key: np.full((T, num_modes), np.nan) for key in ("mean", "q95", "max")}
    out["count"] = np.zeros((T, num_modes), dtype=np.int64)
    for k in range(T):
        for i in range(num_modes):
            v = norms[samples.r[:, k] == i, k]
            out["count"][k, i] = v.size
            if v.size:
                out["mean"][k, i] = v.mean()
                out["q95"][k, i] = np.quantile(v, 0.95)
                out["max"][k, i] = v.max()
    return out


def empirical_cost(samples: Samples, model: MjlsModel) -> Estimate:
    """``sum_k x_k^T Q_k x_k + u_k^T R_k u_k`` over ``k < T``, mean and stderr."""
    T = samples.horizon
    xq = np.einsum("mkc,kcd,mkd->m", samples.x[:, :T], model.q_weight[:T], samples.x[:, :T])
    ur = np.einsum("mkc,kcd,mkd->m", samples.u, model.r_weight[:T], samples.u)
    j = xq + ur
    se = j.std(ddof=1) / np.sqrt(j.size) if j.size > 1 else np.nan
    return Estimate(np.asarray(j.mean()), np.asarray(se))


# -------------------------------------------------------------- identities

@dataclass
class IdentityCheck:
    name: str
    max_z: float
    passed: bool
    entries: int
    excluded_buckets: int
    analytic_gap: float = 0.0


@dataclass
class IdentityReport:
    checks: list = field(default_factory=list)
    z_max: float = 4.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self) -> dict:
        return {c.name: c for c in self.checks}


def verify_identities(samples: Samples, model: MjlsModel, policy: Policy,
                      xi: CovarianceTrajectory, tau: MeanTrajectory, z_max: float = 4.0,
                      min_bucket: int = MIN_BUCKET, use_numba=None) -> IdentityReport:
    """Check the closed-loop moment identities entrywise by z-score.

    Buckets ``(k, i)`` with fewer than ``min_bucket`` samples are left out
    of the pass/fail decision and counted in ``excluded_buckets``.
    """
    x, r, u = samples.x, samples.r, samples.u
    M, T, N = samples.num_samples, model.horizon, model.num_modes
    rT = r[:, :T]
    kk = np.arange(T)[None, :]
    xk = x[:, :T]
    dev_x = xk - tau.xbar[:T][kk, rT]
    dev_u = u - tau.ubar[kk, rT]
    rho = tau.rho[:T]
    s = xi.s[:T]
    K = policy.gains
    ksk = np.einsum("kiuc,kicd,kivd->kiuv", K, s, K)

    def flat(a):
        return a.reshape(a.shape[0], a.shape[1], -1)

    # (name, per-sample feature, expected value, conditional?)
    specs = [
        ("conditional_control_mean", u, tau.ubar, True),
        # policy-implied K S K^T / rho; its gap to Y / rho is the
        # losslessness residual, reported separately as analytic_gap
        ("conditional_control_covariance", _outer_flat(dev_u, dev_u),
         flat(ksk / rho[:, :, None, None]), True),
        ("centering", dev_x, np.zeros((T, N, model.n_x)), False),
        ("state_second_moment", _outer_flat(xk, xk),
         flat(s + rho[:, :, None, None] * np.einsum("kia,kib->kiab", tau.xbar[:T], tau.xbar[:T])),
         False),
        ("state_control_cross", _outer_flat(xk, u),
         flat(rho[:, :, None, None] * np.einsum("kia,kib->kiab", tau.xbar[:T], tau.ubar)
              + np.einsum("kiab,kicb->kiac", s, K)), False),
        ("control_second_moment", _outer_flat(u, u),
         flat(rho[:, :, None, None] * np.einsum("kia,kib->kiab", tau.ubar, tau.ubar) + ksk),
         False),
        ("control_bias_cross", _outer_flat(u, np.broadcast_to(model.bias[None, :T], xk.shape)),
         flat(rho[:, :, None, None] * np.einsum("kia,kb->kiab", tau.ubar, model.bias[:T])),
         False),
    ]
    report = IdentityReport(z_max=z_max)
    for name, feat, expected, conditional in specs:
        count, s1, s2 = _kernels.bucket_sums(feat, rT, N, use_numba)
        if conditional:
            val, se = _conditional(s1, s2, count)
        else:
            # f 1{r=i}: zero outside the bucket, so the bucket sums are the full sums
            val, se = _unconditional(s1, s2, M)
        z = _zscore(val, se, expected)
        small = count < min_bucket
        z = np.where(small[..., None], np.nan, z)
        max_z = float(np.nanmax(z)) if np.any(~np.isnan(z)) else float("nan")
        gap = (float(np.max(np.abs(xi.y - ksk) / rho[:, :, None, None]))
               if name == "conditional_control_covariance" else 0.0)
        report.checks.append(IdentityCheck(
            name=name, max_z=max_z, passed=bool(np.all(np.nan_to_num(z, nan=0.0) <= z_max)),
            entries=int(np.sum(~np.isnan(z))), excluded_buckets=int(small.sum()),
            analytic_gap=gap))
    return report


# ------------------------------------------------------------ mixture paths

def mode_path_check(samples: Samples, chain: MarkovChain, z_max: float = 4.0) -> dict:
    """Compare counts of each mode path ``r_0..r_{T-1}`` with the chain's
    path probabilities (multinomial z-score per path)."""
    r = samples.r[:, :samples.horizon]
    M, T = r.shape
    N = chain.num_modes
    codes = (r * N ** np.arange(T)[None, :]).sum(axis=1)
    counts = np.bincount(codes, minlength=N ** T)
    probs = np.empty(N ** T)
    for code, path in enumerate(itertools.product(range(N), repeat=T)):
        path = path[::-1]  # code is little-endian in the step index
        p = chain.rho0[path[0]]
        for a, b in zip(path[:-1], path[1:]):
            p *= chain.transition[a, b]
        probs[code] = p
    expected = M * probs
    sd = np.sqrt(M * probs * (1 - probs))
    z = _zscore(counts.astype(float), sd, expected)
    return {"num_paths": int(N ** T), "observed_paths": int(np.count_nonzero(counts)),
            "max_z": float(np.max(z)), "passed": bool(np.all(z <= z_max))}
