"""Hot loops for closed-loop sampling and bucketed reductions.

Each kernel has a numba ``@njit`` version and a vectorized numpy version.
Setting ``COVSTEER_DISABLE_NUMBA=1`` (or numba being unavailable) selects
numpy.  All random draws happen outside the kernels, so both paths consume
exactly the same inputs and agree to round-off.
"""
from __future__ import annotations

import os
import warnings

import numpy as np

DISABLE_ENV = "COVSTEER_DISABLE_NUMBA"

# old system TBB: numba falls back to another threading layer on its own
warnings.filterwarnings("ignore", message="The TBB threading layer")

try:
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    flag = os.environ.get(DISABLE_ENV, "").strip().lower()
    return HAVE_NUMBA and flag not in ("1", "true", "yes", "on")


# ---------------------------------------------------------------- simulate

def simulate_numpy(a, b, g, bias, gains, ff, anchors, cum, x0, r0, w, jump):
    """Roll ``M`` closed-loop trajectories forward.

    ``cum`` is the row-wise cumulative transition matrix; the next mode is
    the first column whose cumulative probability exceeds the jump uniform.
    Returns ``x (M, T+1, n_x)``, ``r (M, T+1)``, ``u (M, T, n_u)``.
    """
    M, T = x0.shape[0], a.shape[0]
    n_x, n_u, N = a.shape[-1], b.shape[-1], cum.shape[0]
    x = np.empty((M, T + 1, n_x))
    r = np.empty((M, T + 1), dtype=np.int64)
    u = np.empty((M, T, n_u))
    x[:, 0], r[:, 0] = x0, r0
    for k in range(T):
        rk, xk = r[:, k], x[:, k]
        uk = ff[k, rk] + np.einsum("mij,mj->mi", gains[k, rk], xk - anchors[k, rk])
        x[:, k + 1] = (np.einsum("mij,mj->mi", a[k, rk], xk)
                       + np.einsum("mij,mj->mi", b[k, rk], uk)
                       + np.einsum("mij,mj->mi", g[k, rk], w[:, k]) + bias[k])
        u[:, k] = uk
        nxt = (jump[:, k, None] >= cum[rk]).sum(axis=1)
        r[:, k + 1] = np.minimum(nxt, N - 1)
    return x, r, u


def bucket_sums_numpy(values, modes, num_modes):
    """Per ``(step, mode)``: sample count, and sums of ``v`` and ``v**2``
    taken over the samples in that mode (zero elsewhere)."""
    M, K, p = values.shape
    count = np.zeros((K, num_modes), dtype=np.int64)
    s1 = np.zeros((K, num_modes, p))
    s2 = np.zeros((K, num_modes, p))
    for i in range(num_modes):
        mask = (modes == i)
        count[:, i] = mask.sum(axis=0)
        v = values * mask[:, :, None]
        s1[:, i] = v.sum(axis=0)
        s2[:, i] = (v * v).sum(axis=0)
    return count, s1, s2


if HAVE_NUMBA:
    @njit(cache=True, parallel=True)
    def _simulate_nb(a, b, g, bias, gains, ff, anchors, cum, x0, r0, w, jump):
        M, T = x0.shape[0], a.shape[0]
        n_x, n_u, n_w, N = a.shape[3], b.shape[3], g.shape[3], cum.shape[0]
        x = np.empty((M, T + 1, n_x))
        r = np.empty((M, T + 1), dtype=np.int64)
        u = np.empty((M, T, n_u))
        for s in prange(M):
            for c in range(n_x):
                x[s, 0, c] = x0[s, c]
            r[s, 0] = r0[s]
            for k in range(T):
                i = r[s, k]
                for e in range(n_u):
                    acc = ff[k, i, e]
                    for c in range(n_x):
                        acc += gains[k, i, e, c] * (x[s, k, c] - anchors[k, i, c])
                    u[s, k, e] = acc
                for c in range(n_x):
                    acc = bias[k, c]
                    for d in range(n_x):
                        acc += a[k, i, c, d] * x[s, k, d]
                    for e in range(n_u):
                        acc += b[k, i, c, e] * u[s, k, e]
                    for e in range(n_w):
                        acc += g[k, i, c, e] * w[s, k, e]
                    x[s, k + 1, c] = acc
                nxt = 0
                for j in range(N):
                    if jump[s, k] >= cum[i, j]:
                        nxt += 1
                r[s, k + 1] = min(nxt, N - 1)
        return x, r, u

    @njit(cache=True)
    def _bucket_sums_nb(values, modes, num_modes):
        # sequential on purpose: fixed summation order keeps reports reproducible
        M, K, p = values.shape
        count = np.zeros((K, num_modes), dtype=np.int64)
        s1 = np.zeros((K, num_modes, p))
        s2 = np.zeros((K, num_modes, p))
        for s in range(M):
            for k in range(K):
                i = modes[s, k]
                count[k, i] += 1
                for c in range(p):
                    v = values[s, k, c]
                    s1[k, i, c] += v
                    s2[k, i, c] += v * v
        return count, s1, s2


def _c(arr, dtype=np.float64):
    return np.ascontiguousarray(arr, dtype=dtype)


def simulate(a, b, g, bias, gains, ff, anchors, cum, x0, r0, w, jump, use_numba=None):
    use = numba_enabled() if use_numba is None else (use_numba and HAVE_NUMBA)
    args = [_c(a), _c(b), _c(g), _c(bias), _c(gains), _c(ff), _c(anchors), _c(cum),
            _c(x0), _c(r0, np.int64), _c(w), _c(jump)]
    if use:
        return _simulate_nb(*args)
    return simulate_numpy(*args)


def bucket_sums(values, modes, num_modes, use_numba=None):
    use = numba_enabled() if use_numba is None else (use_numba and HAVE_NUMBA)
    values, modes = _c(values), _c(modes, np.int64)
    if use:
        return _bucket_sums_nb(values, modes, int(num_modes))
    return bucket_sums_numpy(values, modes, int(num_modes))
