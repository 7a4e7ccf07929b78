"""Exact moment propagation for an MJLS under the mode-dependent affine policy
``u = ubar(i) + K(i) (x - xbar(i))``.

Everything is expressed in partial moments: ``q_k(i) = E[x_k 1{r_k=i}]`` and
``S_k(i) = E[(x_k - xbar_k(i))(x_k - xbar_k(i))^T 1{r_k=i}]``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import MarkovChain, MjlsModel

log = logging.getLogger(__name__)

PSD_FLAG_TOL = 1e-10
INVERT_TOL = 1e-10


class SingularCovarianceError(ValueError):
    def __init__(self, k, i, min_eig):
        self.k, self.i, self.min_eig = k, i, min_eig
        super().__init__(f"S[{k}][{i}] is singular or indefinite "
                         f"(min eigenvalue {min_eig:.3g}); cannot extract a gain")


@dataclass
class MeanTrajectory:
    mu: np.ndarray     # (T+1, n_x)
    q: np.ndarray      # (T+1, N, n_x)
    xbar: np.ndarray   # (T+1, N, n_x)
    ubar: np.ndarray   # (T, N, n_u)
    rho: np.ndarray    # (T+1, N)


@dataclass
class CovarianceTrajectory:
    s: np.ndarray      # (T+1, N, n_x, n_x)
    sigma: np.ndarray  # (T+1, n_x, n_x)
    l: np.ndarray      # (T, N, n_u, n_x)
    y: np.ndarray      # (T, N, n_u, n_u)
    flags: list = field(default_factory=list)


@dataclass
class Policy:
    gains: np.ndarray        # (T, N, n_u, n_x)
    feedforward: np.ndarray  # (T, N, n_u)
    anchors: np.ndarray      # (T, N, n_x)

    def control(self, k: int, i: int, x: np.ndarray) -> np.ndarray:
        return self.feedforward[k, i] + self.gains[k, i] @ (x - self.anchors[k, i])

    def to_dict(self) -> dict:
        return {"gains": self.gains.tolist(), "feedforward": self.feedforward.tolist(),
                "anchors": self.anchors.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        return cls(np.array(d["gains"], float), np.array(d["feedforward"], float),
                   np.array(d["anchors"], float))

    @classmethod
    def zero(cls, model: MjlsModel) -> "Policy":
        T, N = model.horizon, model.num_modes
        return cls(np.zeros((T, N, model.n_u, model.n_x)), np.zeros((T, N, model.n_u)),
                   np.zeros((T, N, model.n_x)))


def _sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def propagate_mode_distribution(chain: MarkovChain, horizon: int) -> np.ndarray:
    """Mode probabilities ``rho_k = rho_0 P^k`` for ``k = 0..horizon``."""
    rho = np.empty((horizon + 1, chain.num_modes))
    rho[0] = chain.rho0
    for k in range(horizon):
        rho[k + 1] = rho[k] @ chain.transition
    return rho


def propagate_mean(model: MjlsModel, ubar) -> MeanTrajectory:
    T, N, n_x = model.horizon, model.num_modes, model.n_x
    ubar = np.asarray(ubar, dtype=float)
    if ubar.shape != (T, N, model.n_u):
        raise ValueError(f"ubar has shape {ubar.shape}, expected {(T, N, model.n_u)}")
    P = model.transition
    rho = propagate_mode_distribution(model.chain, T)
    q = np.empty((T + 1, N, n_x))
    q[0] = rho[0][:, None] * model.mu0
    for k in range(T):
        # per source mode i: A q + rho (B ubar + c)
        src = np.einsum("iab,ib->ia", model.a[k], q[k]) + rho[k][:, None] * (
            np.einsum("iab,ib->ia", model.b[k], ubar[k]) + model.bias[k])
        q[k + 1] = P.T @ src
    xbar = q / rho[:, :, None]
    return MeanTrajectory(mu=q.sum(axis=1), q=q, xbar=xbar, ubar=ubar.copy(), rho=rho)


def mean_outer_terms(model: MjlsModel, tau: MeanTrajectory, k: int) -> np.ndarray:
    """Per source mode ``i``: ``rho_k(i) (m m^T + G G^T)`` with
    ``m = A xbar + B ubar + c``."""
    m = (np.einsum("iab,ib->ia", model.a[k], tau.xbar[k])
         + np.einsum("iab,ib->ia", model.b[k], tau.ubar[k]) + model.bias[k])
    gg = np.einsum("iab,icb->iac", model.g[k], model.g[k])
    return tau.rho[k][:, None, None] * (np.einsum("ia,ib->iab", m, m) + gg)


def covariance_step(model: MjlsModel, tau: MeanTrajectory, k: int, s_k, l_k, y_k):
    """One application of the L/Y-form partial covariance recursion."""
    A, B, P = model.a[k], model.b[k], model.transition
    ALB = np.einsum("iab,icb,idc->iad", A, l_k, B)  # A L^T B^T
    per_mode = (np.einsum("iab,ibc,idc->iad", A, s_k, A) + ALB + np.swapaxes(ALB, 1, 2)
                + np.einsum("iab,ibc,idc->iad", B, y_k, B)
                + mean_outer_terms(model, tau, k))
    nxt = np.einsum("ij,iab->jab", P, per_mode)
    xb = tau.xbar[k + 1]
    nxt -= tau.rho[k + 1][:, None, None] * np.einsum("ja,jb->jab", xb, xb)
    return _sym(nxt)


def assemble_total_covariance(s, tau: MeanTrajectory, rho=None) -> np.ndarray:
    """Total covariance from partial covariances plus the mean spread term."""
    s = np.asarray(s)
    rho = tau.rho if rho is None else rho
    d = tau.xbar - tau.mu[:, None, :]
    spread = np.einsum("ki,kia,kib->kab", rho, d, d)
    return _sym(s.sum(axis=1) + spread)


def _flag_indefinite(s, start=0):
    flags = []
    for k in range(start, s.shape[0]):
        for i in range(s.shape[1]):
            ev = float(np.linalg.eigvalsh(s[k, i]).min())
            if ev < PSD_FLAG_TOL:
                flags.append((k, i, ev))
    return flags


def propagate_covariance(model: MjlsModel, tau: MeanTrajectory, l, y, s0=None
                         ) -> CovarianceTrajectory:
    T, N, n_x, n_u = model.horizon, model.num_modes, model.n_x, model.n_u
    l, y = np.asarray(l, float), np.asarray(y, float)
    if l.shape != (T, N, n_u, n_x) or y.shape != (T, N, n_u, n_u):
        raise ValueError("L/Y dimensions do not match the model")
    s = np.empty((T + 1, N, n_x, n_x))
    s[0] = tau.rho[0][:, None, None] * model.sigma0 if s0 is None else _sym(np.asarray(s0))
    for k in range(T):
        s[k + 1] = covariance_step(model, tau, k, s[k], l[k], y[k])
    flags = _flag_indefinite(s)
    if flags:
        log.warning("partial covariance not positive definite at %s",
                    [(k, i) for k, i, _ in flags])
    return CovarianceTrajectory(s=s, sigma=assemble_total_covariance(s, tau), l=l.copy(),
                                y=_sym(y), flags=flags)


def closed_loop_moments(model: MjlsModel, policy: Policy):
    """Exact ``(tau, xi)`` produced by playing ``policy``.

    Anchors need not equal the true conditional means; the mismatch is folded
    into the effective feedforward ``ubar + K (xbar - anchor)``.
    """
    T, N = model.horizon, model.num_modes
    n_x, n_u = model.n_x, model.n_u
    K = policy.gains
    rho = propagate_mode_distribution(model.chain, T)
    q = np.empty((T + 1, N, n_x))
    q[0] = rho[0][:, None] * model.mu0
    ubar_eff = np.empty((T, N, n_u))
    P = model.transition
    for k in range(T):
        xb = q[k] / rho[k][:, None]
        ubar_eff[k] = policy.feedforward[k] + np.einsum("iab,ib->ia", K[k], xb - policy.anchors[k])
        src = np.einsum("iab,ib->ia", model.a[k], q[k]) + rho[k][:, None] * (
            np.einsum("iab,ib->ia", model.b[k], ubar_eff[k]) + model.bias[k])
        q[k + 1] = P.T @ src
    tau = propagate_mean(model, ubar_eff)
    s = np.empty((T + 1, N, n_x, n_x))
    s[0] = rho[0][:, None, None] * model.sigma0
    l = np.empty((T, N, n_u, n_x))
    y = np.empty((T, N, n_u, n_u))
    for k in range(T):
        l[k] = K[k] @ s[k]
        y[k] = _sym(l[k] @ np.swapaxes(K[k], 1, 2))
        s[k + 1] = covariance_step(model, tau, k, s[k], l[k], y[k])
    xi = CovarianceTrajectory(s=s, sigma=assemble_total_covariance(s, tau), l=l, y=y,
                              flags=_flag_indefinite(s))
    return tau, xi


def evaluate_cost(tau: MeanTrajectory, xi: CovarianceTrajectory, model: MjlsModel):
    """Returns ``(J_total, J_mean, J_cov)``."""
    T = model.horizon
    Q, R = model.q_weight, model.r_weight
    j_mean = float(
        np.einsum("ki,kia,kab,kib->", tau.rho[:T], tau.xbar[:T], Q, tau.xbar[:T])
        + np.einsum("ki,kia,kab,kib->", tau.rho[:T], tau.ubar, R, tau.ubar))
    j_cov = float(np.einsum("kiab,kba->", xi.s[:T], Q) + np.einsum("kiab,kba->", xi.y, R))
    return j_mean + j_cov, j_mean, j_cov


def extract_policy(xi: CovarianceTrajectory, tau: MeanTrajectory) -> Policy:
    T, N = xi.l.shape[:2]
    gains = np.empty_like(xi.l)
    for k in range(T):
        for i in range(N):
            s = xi.s[k, i]
            ev = float(np.linalg.eigvalsh(s).min())
            if ev <= INVERT_TOL:
                raise SingularCovarianceError(k, i, ev)
            # K = L S^{-1}, S symmetric
            gains[k, i] = np.linalg.solve(s, xi.l[k, i].T).T
    return Policy(gains=gains, feedforward=tau.ubar.copy(), anchors=tau.xbar[:T].copy())


# ------------------------------------------------------------------- export

def trajectory_records(tau: MeanTrajectory, xi: Optional[CovarianceTrajectory] = None):
    """Long-format rows ``(k, i, quantity, row, col, value)``; ``i`` is ``""``
    for mode-free quantities."""
    rows = []

    def emit(name, arr, has_mode):
        for idx in np.ndindex(arr.shape):
            k = idx[0]
            i = idx[1] if has_mode else ""
            rest = idx[2:] if has_mode else idx[1:]
            r = rest[0] if rest else 0
            c = rest[1] if len(rest) > 1 else 0
            rows.append((k, i, name, r, c, float(arr[idx])))

    emit("rho", tau.rho[:, :, None], True)
    emit("mu", tau.mu, False)
    emit("q", tau.q, True)
    emit("xbar", tau.xbar, True)
    emit("ubar", tau.ubar, True)
    if xi is not None:
        emit("S", xi.s, True)
        emit("Sigma", xi.sigma, False)
        emit("L", xi.l, True)
        emit("Y", xi.y, True)
    return rows


def write_trajectory_csv(path, tau, xi=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "i", "quantity", "row", "col", "value"])
        for k, i, name, r, c, v in trajectory_records(tau, xi):
            w.writerow([k, i, name, r, c, repr(v)])


def trajectory_to_dict(tau, xi=None) -> dict:
    d = {"rho": tau.rho.tolist(), "mu": tau.mu.tolist(), "q": tau.q.tolist(),
         "xbar": tau.xbar.tolist(), "ubar": tau.ubar.tolist()}
    if xi is not None:
        d.update(S=xi.s.tolist(), Sigma=xi.sigma.tolist(), L=xi.l.tolist(), Y=xi.y.tolist())
    return d


def trajectory_from_dict(d: dict):
    tau = MeanTrajectory(mu=np.array(d["mu"]), q=np.array(d["q"]), xbar=np.array(d["xbar"]),
                         ubar=np.array(d["ubar"]), rho=np.array(d["rho"]))
    xi = None
    if "S" in d:
        xi = CovarianceTrajectory(s=np.array(d["S"]), sigma=np.array(d["Sigma"]),
                                  l=np.array(d["L"]), y=np.array(d["Y"]))
    return tau, xi


def write_trajectory_json(path, tau, xi=None) -> None:
    with open(path, "w") as fh:
        json.dump(trajectory_to_dict(tau, xi), fh)
        fh.write("\n")
