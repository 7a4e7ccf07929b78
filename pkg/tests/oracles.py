"""Independent reference solutions used by the tests.

Both oracles handle a single mode only and are written against the classic
single-mode formulation (state mean and covariance, no mode bookkeeping), so
they share no code with the steering module.
"""
import numpy as np


def single_mode_mean_qp(a, b, c, q, r, mu0, mu_f, T):
    """Minimum of ``sum_{k<T} m_k' Q m_k + v_k' R v_k`` over controls
    ``v``, with ``m_{k+1} = A m_k + B v_k + c``, ``m_0 = mu0``,
    ``m_T = mu_f``.  States are eliminated and the equality-constrained
    QP is solved through its dense KKT system."""
    n_x, n_u = b.shape
    # m_k = F_k mu0 + H_k v + e_k
    F = [np.eye(n_x)]
    H = [np.zeros((n_x, n_u * T))]
    e = [np.zeros(n_x)]
    for k in range(T):
        Hk = a @ H[k]
        Hk[:, k * n_u:(k + 1) * n_u] += b
        F.append(a @ F[k])
        H.append(Hk)
        e.append(a @ e[k] + c)
    P = np.zeros((n_u * T, n_u * T))
    g = np.zeros(n_u * T)
    const = 0.0
    for k in range(T):
        off = F[k] @ mu0 + e[k]
        P += H[k].T @ q @ H[k]
        g += H[k].T @ q @ off
        const += off @ q @ off
        P[k * n_u:(k + 1) * n_u, k * n_u:(k + 1) * n_u] += r
    Aeq = H[T]
    beq = mu_f - F[T] @ mu0 - e[T]
    nv, ne = n_u * T, n_x
    kkt = np.block([[2 * P, Aeq.T], [Aeq, np.zeros((ne, ne))]])
    rhs = np.concatenate([-2 * g, beq])
    v = np.linalg.solve(kkt, rhs)[:nv]
    return float(v @ P @ v + 2 * g @ v + const), v.reshape(T, n_u)


def single_mode_covariance_sdp(a, b, g, q, r, sigma0, sigma_f, T, solver="CLARABEL"):
    """Optimal ``sum_{k<T} tr(Q Sigma_k) + tr(R Y_k)`` of the lifted
    single-mode covariance steering SDP (variables Sigma_k, U_k = K_k
    Sigma_k, Y_k >= U_k Sigma_k^-1 U_k'), modelled with cvxpy."""
    import cvxpy as cp

    n_x, n_u = b.shape
    sig = [cp.Variable((n_x, n_x), symmetric=True) for _ in range(T + 1)]
    U = [cp.Variable((n_u, n_x)) for _ in range(T)]
    Y = [cp.Variable((n_u, n_u), symmetric=True) for _ in range(T)]
    cons = [sig[0] == sigma0, sigma_f - sig[T] >> 0]
    for k in range(T):
        cons.append(sig[k + 1] == a @ sig[k] @ a.T + b @ U[k] @ a.T + a @ U[k].T @ b.T
                    + b @ Y[k] @ b.T + g @ g.T)
        cons.append(cp.bmat([[Y[k], U[k]], [U[k].T, sig[k]]]) >> 0)
    obj = sum(cp.trace(q @ sig[k]) + cp.trace(r @ Y[k]) for k in range(T))
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver=solver)
    assert prob.status == "optimal", prob.status
    return float(prob.value)


def random_single_mode_instance(rng, T, n_x=2, n_u=2):
    """A steerable single-mode instance with a binding terminal covariance."""
    from covsteer.model import MarkovChain, ModeDynamics, MjlsModel

    a = rng.normal(size=(n_x, n_x)) / np.sqrt(n_x) * 1.1
    b = rng.normal(size=(n_x, n_u))
    while abs(np.linalg.det(b @ b.T)) < 0.1:
        b = rng.normal(size=(n_x, n_u))
    g = 0.5 * rng.normal(size=(n_x, n_x))
    cq = rng.normal(size=(n_x, n_x))
    cr = rng.normal(size=(n_u, n_u))
    q = cq @ cq.T
    r = cr @ cr.T + 0.5 * np.eye(n_u)
    c0 = rng.normal(size=(n_x, n_x))
    sigma0 = c0 @ c0.T + np.eye(n_x)
    sigma_f = g @ g.T + 0.5 * np.eye(n_x)
    model = MjlsModel.from_modes(
        [ModeDynamics(a, b, g)], MarkovChain(np.ones((1, 1)), np.ones(1)), T,
        q_weight=q, r_weight=r, mu0=5 * rng.normal(size=n_x), sigma0=sigma0,
        mu_f=rng.normal(size=n_x), sigma_f=sigma_f, bias=0.1 * rng.normal(size=n_x))
    return model


def single_mode_oracle_cost(model, solver="CLARABEL"):
    a, b, g = model.a[0, 0], model.b[0, 0], model.g[0, 0]
    T = model.horizon
    jm, _ = single_mode_mean_qp(a, b, model.bias[0], model.q_weight[0], model.r_weight[0],
                                model.mu0, model.mu_f, T)
    jc = single_mode_covariance_sdp(a, b, g, model.q_weight[0], model.r_weight[0],
                                    model.sigma0, model.sigma_f, T, solver)
    return jm + jc, jm, jc
