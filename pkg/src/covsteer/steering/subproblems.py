"""The mean and covariance subproblems of the two-step scheme, with and
without slack-penalized chance constraints.

Block names follow ``<symbol>_<k>_<i>`` (mode index last); slack families
are vectors ``beta_<family>`` / ``zeta_<family>`` over time steps.
"""
from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from ..conic import Affine, ConicProgram, add_psd_block_2x2
from ..model import ChanceConstraintSet, MjlsModel
from ..propagation import (CovarianceTrajectory, MeanTrajectory, assemble_total_covariance,
                           mean_outer_terms, propagate_mode_distribution)
from .tightening import TighteningCoefficients, allocate_risk

log = logging.getLogger(__name__)

FAMILIES = ("state_halfplane", "control_halfplane", "state_tube", "control_norm")


def default_weights(alpha: float = 1e2) -> dict:
    return {f: float(alpha) for f in FAMILIES}


def state_steps(model: MjlsModel, cc: ChanceConstraintSet) -> range:
    return range(model.horizon + 1 if cc.include_terminal else model.horizon)


# ------------------------------------------------------------------ mean side

def _mean_program(model: MjlsModel, name: str):
    T, N, n_x, n_u = model.horizon, model.num_modes, model.n_x, model.n_u
    rho = propagate_mode_distribution(model.chain, T)
    P = model.transition
    prog = ConicProgram(name)
    q = [[prog.add_variable(f"q_{k}_{i}", "vector", n_x) for i in range(N)] for k in range(T + 1)]
    xb = [[prog.add_variable(f"xbar_{k}_{i}", "vector", n_x) for i in range(N)]
          for k in range(T + 1)]
    ub = [[prog.add_variable(f"ubar_{k}_{i}", "vector", n_u) for i in range(N)] for k in range(T)]
    mu = [prog.add_variable(f"mu_{k}", "vector", n_x) for k in range(T + 1)]

    for i in range(N):
        prog.add_equality(q[0][i], rho[0, i] * model.mu0, label=f"q0[{i}]")
    for k in range(T):
        for j in range(N):
            rhs = None
            for i in range(N):
                if P[i, j] == 0.0:
                    continue
                term = P[i, j] * (model.a[k, i] @ q[k][i]
                                  + rho[k, i] * (model.b[k, i] @ ub[k][i] + model.bias[k][:, None]))
                rhs = term if rhs is None else rhs + term
            prog.add_equality(q[k + 1][j], rhs if rhs is not None else 0.0,
                              label=f"mean_dyn[{k}][{j}]")
    for k in range(T + 1):
        total = q[k][0]
        for i in range(N):
            prog.add_equality(rho[k, i] * xb[k][i], q[k][i], label=f"xbar[{k}][{i}]")
            if i:
                total = total + q[k][i]
        prog.add_equality(mu[k], total, label=f"mu[{k}]")
    prog.add_equality(mu[T], model.mu_f, label="terminal_mean")

    for k in range(T):
        for i in range(N):
            prog.add_quadratic_objective(xb[k][i], rho[k, i] * model.q_weight[k])
            prog.add_quadratic_objective(ub[k][i], rho[k, i] * model.r_weight[k])
    return prog, dict(q=q, xbar=xb, ubar=ub, mu=mu, rho=rho)


def build_mean_unconstrained(model: MjlsModel) -> ConicProgram:
    """Mean subproblem: minimize the mean part of the cost subject to the
    partial-mean dynamics and both boundary conditions."""
    prog, _ = _mean_program(model, "mean")
    return prog


def build_mean_cc(model: MjlsModel, cc: ChanceConstraintSet, xi: CovarianceTrajectory,
                  weights: Optional[dict] = None,
                  coeffs: Optional[TighteningCoefficients] = None) -> ConicProgram:
    """Mean subproblem with tightened half-plane and norm constraints.

    The covariance-dependent margins come from the fixed ``xi`` and enter as
    constants, so the program stays a QP with second-order cones.
    """
    weights = weights or default_weights()
    coeffs = coeffs or allocate_risk(cc, model.n_x, model.n_u, model.num_modes)
    prog, v = _mean_program(model, "mean_cc")
    T, N = model.horizon, model.num_modes

    if cc.state_halfplanes:
        steps = state_steps(model, cc)
        beta = prog.add_variable("beta_state_halfplane", "vector", len(steps))
        prog.add_nonneg(beta, label="beta_state_halfplane>=0")
        for n, k in enumerate(steps):
            for j, h in enumerate(cc.state_halfplanes):
                margin = coeffs.state_kappa[j] * np.sqrt(max(h.normal @ xi.sigma[k] @ h.normal, 0.0))
                prog.add_nonneg(beta.rows(n) - (h.normal[None, :] @ v["mu"][k]) - (h.offset + margin),
                                label=f"state_halfplane[{k}][{j}]")
        prog.add_linear_objective(weights["state_halfplane"] * beta.sum())

    if cc.control_halfplanes:
        beta = prog.add_variable("beta_control_halfplane", "vector", T)
        prog.add_nonneg(beta, label="beta_control_halfplane>=0")
        for k in range(T):
            for i in range(N):
                for j, h in enumerate(cc.control_halfplanes):
                    var = max(h.normal @ xi.y[k, i] @ h.normal, 0.0)
                    margin = coeffs.control_kappa[i, j] * np.sqrt(var)
                    prog.add_nonneg(beta.rows(k) - (h.normal[None, :] @ v["ubar"][k][i])
                                    - (h.offset + margin), label=f"control_halfplane[{k}][{i}][{j}]")
        prog.add_linear_objective(weights["control_halfplane"] * beta.sum())

    if cc.control_norm is not None:
        beta = prog.add_variable("beta_control_norm", "vector", T)
        prog.add_nonneg(beta, label="beta_control_norm>=0")
        for k in range(T):
            for i in range(N):
                lam = max(float(np.linalg.eigvalsh(xi.y[k, i]).max()), 0.0)
                margin = np.sqrt(coeffs.norm_factor[i] * lam)
                head = beta.rows(k) + (cc.control_norm.u_max[i] - margin)
                prog.add_soc(head, v["ubar"][k][i], label=f"control_norm[{k}][{i}]")
        prog.add_linear_objective(weights["control_norm"] * beta.sum())
    return prog


def mean_from_values(model: MjlsModel, values: dict) -> MeanTrajectory:
    T, N = model.horizon, model.num_modes
    rho = propagate_mode_distribution(model.chain, T)
    q = np.array([[values[f"q_{k}_{i}"] for i in range(N)] for k in range(T + 1)])
    ubar = np.array([[values[f"ubar_{k}_{i}"] for i in range(N)] for k in range(T)])
    # x̄ and μ re-derived from q so the trajectory satisfies its identities exactly
    return MeanTrajectory(mu=q.sum(axis=1), q=q, xbar=q / rho[:, :, None], ubar=ubar, rho=rho)


# ------------------------------------------------------------ covariance side

def _cov_program(model: MjlsModel, tau: MeanTrajectory, name: str):
    T, N, n_x, n_u = model.horizon, model.num_modes, model.n_x, model.n_u
    P = model.transition
    prog = ConicProgram(name)
    S = [[prog.add_variable(f"S_{k}_{i}", "symmetric", n_x) for i in range(N)]
         for k in range(T + 1)]
    L = [[prog.add_variable(f"L_{k}_{i}", "matrix", n_u, n_x) for i in range(N)] for k in range(T)]
    Y = [[prog.add_variable(f"Y_{k}_{i}", "symmetric", n_u) for i in range(N)] for k in range(T)]

    for i in range(N):
        prog.add_equality(S[0][i], tau.rho[0, i] * model.sigma0, symmetric=True,
                          label=f"S0[{i}]")
    for k in range(T):
        outer = mean_outer_terms(model, tau, k)
        for j in range(N):
            rhs = Affine.constant(-tau.rho[k + 1, j] * np.outer(tau.xbar[k + 1, j],
                                                                 tau.xbar[k + 1, j]), prog.nvar)
            for i in range(N):
                if P[i, j] == 0.0:
                    continue
                A, B = model.a[k, i], model.b[k, i]
                ALB = A @ L[k][i].T @ B.T
                rhs = rhs + P[i, j] * (A @ S[k][i] @ A.T + ALB + ALB.T + B @ Y[k][i] @ B.T
                                       + outer[i])
            prog.add_equality(S[k + 1][j], rhs, symmetric=True, label=f"cov_dyn[{k}][{j}]")
        for i in range(N):
            add_psd_block_2x2(prog, Y[k][i], L[k][i], S[k][i], label=f"schur[{k}][{i}]")
            prog.add_linear_objective(S[k][i].trace_with(model.q_weight[k])
                                      + Y[k][i].trace_with(model.r_weight[k]))
    sigma = [total_covariance_expr(S[k], tau, k) for k in range(T + 1)]
    prog.add_psd(model.sigma_f - sigma[T], label="terminal_cov")
    return prog, dict(S=S, L=L, Y=Y, sigma=sigma)


def total_covariance_expr(s_k, tau: MeanTrajectory, k: int) -> Affine:
    d = tau.xbar[k] - tau.mu[k]
    spread = np.einsum("i,ia,ib->ab", tau.rho[k], d, d)
    total = s_k[0]
    for e in s_k[1:]:
        total = total + e
    return total + spread


def build_cov_unconstrained(model: MjlsModel, tau: MeanTrajectory) -> ConicProgram:
    """Covariance subproblem for a fixed mean trajectory: linear partial
    covariance dynamics, Schur-complement relaxation of ``Y = L S^-1 L^T``,
    and the terminal bound ``Sigma_T <= Sigma_f``."""
    prog, _ = _cov_program(model, tau, "cov")
    return prog


def build_cov_cc(model: MjlsModel, cc: ChanceConstraintSet, tau: MeanTrajectory,
                 weights: Optional[dict] = None,
                 coeffs: Optional[TighteningCoefficients] = None,
                 notes: Optional[list] = None) -> ConicProgram:
    """Covariance subproblem with squared (convex in the covariance)
    chance-constraint surrogates and slack penalties.

    Where the fixed mean already violates a constraint, the squared mean
    term is replaced by zero (the slack then absorbs the violation) and a
    note is appended to ``notes``.
    """
    weights = weights or default_weights()
    coeffs = coeffs or allocate_risk(cc, model.n_x, model.n_u, model.num_modes)
    notes = notes if notes is not None else []
    prog, v = _cov_program(model, tau, "cov_cc")
    T, N, n_x, n_u = model.horizon, model.num_modes, model.n_x, model.n_u

    if cc.state_halfplanes:
        steps = state_steps(model, cc)
        zeta = prog.add_variable("zeta_state_halfplane", "vector", len(steps))
        prog.add_nonneg(zeta, label="zeta_state_halfplane>=0")
        for n, k in enumerate(steps):
            for j, h in enumerate(cc.state_halfplanes):
                gap = float(h.normal @ tau.mu[k] + h.offset)
                if gap > 0:
                    notes.append(f"mean violates state half-plane {j} at k={k}")
                room = gap ** 2 if gap <= 0 else 0.0
                d = coeffs.state_risk[j]
                lhs = ((1 - d) / d) * v["sigma"][k].trace_with(np.outer(h.normal, h.normal))
                prog.add_nonneg(zeta.rows(n) - lhs + room, label=f"state_halfplane_sq[{k}][{j}]")
        prog.add_linear_objective(weights["state_halfplane"] * zeta.sum())

    if cc.control_halfplanes:
        zeta = prog.add_variable("zeta_control_halfplane", "vector", T)
        prog.add_nonneg(zeta, label="zeta_control_halfplane>=0")
        for k in range(T):
            for i in range(N):
                for j, h in enumerate(cc.control_halfplanes):
                    gap = float(h.normal @ tau.ubar[k, i] + h.offset)
                    if gap > 0:
                        notes.append(f"mean control violates half-plane {j} at k={k}, mode {i}")
                    room = gap ** 2 if gap <= 0 else 0.0
                    d = coeffs.control_risk[i, j]
                    lhs = ((1 - d) / d) * v["Y"][k][i].trace_with(np.outer(h.normal, h.normal))
                    prog.add_nonneg(zeta.rows(k) - lhs + room,
                                    label=f"control_halfplane_sq[{k}][{i}][{j}]")
        prog.add_linear_objective(weights["control_halfplane"] * zeta.sum())

    if cc.state_tube is not None:
        steps = state_steps(model, cc)
        zeta = prog.add_variable("zeta_state_tube", "vector", len(steps))
        prog.add_nonneg(zeta, label="zeta_state_tube>=0")
        for n, k in enumerate(steps):
            bound = zeta.rows(n) + cc.state_tube.d_max ** 2
            prog.add_psd(bound.times_matrix(np.eye(n_x)) - coeffs.tube_factor * v["sigma"][k],
                         label=f"state_tube[{k}]")
        prog.add_linear_objective(weights["state_tube"] * zeta.sum())

    if cc.control_norm is not None:
        zeta = prog.add_variable("zeta_control_norm", "vector", T)
        prog.add_nonneg(zeta, label="zeta_control_norm>=0")
        for k in range(T):
            for i in range(N):
                u_m = cc.control_norm.u_max[i] - float(np.linalg.norm(tau.ubar[k, i]))
                if u_m < 0:
                    notes.append(f"mean control exceeds norm budget at k={k}, mode {i}")
                    u_m = 0.0
                bound = zeta.rows(k) + u_m ** 2
                prog.add_psd(bound.times_matrix(np.eye(n_u)) - coeffs.norm_factor[i] * v["Y"][k][i],
                             label=f"control_norm[{k}][{i}]")
        prog.add_linear_objective(weights["control_norm"] * zeta.sum())
    return prog


def cov_from_values(model: MjlsModel, tau: MeanTrajectory, values: dict) -> CovarianceTrajectory:
    T, N = model.horizon, model.num_modes
    s = np.array([[values[f"S_{k}_{i}"] for i in range(N)] for k in range(T + 1)])
    l = np.array([[values[f"L_{k}_{i}"] for i in range(N)] for k in range(T)])
    y = np.array([[values[f"Y_{k}_{i}"] for i in range(N)] for k in range(T)])
    return CovarianceTrajectory(s=s, sigma=assemble_total_covariance(s, tau), l=l, y=y)


def slack_values(values: dict, prefix: str) -> dict:
    """``{family: slack vector}`` for blocks named ``<prefix>_<family>``."""
    out = {}
    for fam in FAMILIES:
        key = f"{prefix}_{fam}"
        if key in values:
            out[fam] = np.atleast_1d(values[key])
    return out
