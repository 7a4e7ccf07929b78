"""Closed-loop trajectory sampling under a mode-dependent affine policy."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from ..model import MjlsModel
from ..propagation import Policy
from . import _kernels

STREAMS = ("initial_mode", "initial_state", "process_noise", "mode_jumps")


def gaussian_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def uniform_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Zero mean, unit variance, bounded support."""
    h = np.sqrt(3.0)
    return rng.uniform(-h, h, shape)


NOISE_MODELS = {"gaussian": gaussian_noise, "uniform": uniform_noise}

NoiseHook = Callable[[np.random.Generator, tuple], np.ndarray]


@dataclass(frozen=True)
class SimulationConfig:
    """``seed`` feeds a ``SeedSequence`` that is split into one Philox stream
    per source of randomness (see :data:`STREAMS`), so the initial mode,
    initial state, process noise and mode jumps never share draws.

    Draws are laid out sample-major, so the first ``n`` samples of a larger
    run equal an ``n``-sample run with the same seed.
    """

    num_samples: int
    seed: int = 0
    noise_model: Union[str, NoiseHook] = "gaussian"
    use_numba: Optional[bool] = None

    def __post_init__(self):
        if int(self.num_samples) < 1:
            raise ValueError("num_samples must be at least 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if isinstance(self.noise_model, str) and self.noise_model not in NOISE_MODELS:
            raise ValueError(f"unknown noise model {self.noise_model!r}")

    @property
    def noise_name(self) -> str:
        if isinstance(self.noise_model, str):
            return self.noise_model
        return getattr(self.noise_model, "__name__", "custom")

    def noise_hook(self) -> NoiseHook:
        if isinstance(self.noise_model, str):
            return NOISE_MODELS[self.noise_model]
        return self.noise_model


def rng_streams(seed: int) -> dict:
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.Philox(ss)) for name, ss in zip(STREAMS, children)}


@dataclass
class Samples:
    x: np.ndarray   # (M, T+1, n_x)
    r: np.ndarray   # (M, T+1) modes r_0..r_T
    u: np.ndarray   # (M, T, n_u)
    seed: int = 0
    noise_model: str = "gaussian"

    @property
    def num_samples(self) -> int:
        return self.x.shape[0]

    @property
    def horizon(self) -> int:
        return self.u.shape[1]


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    """``F`` with ``F F^T = cov``; falls back to an eigen-factor when ``cov``
    is only semidefinite (e.g. a deterministic initial state)."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (cov + cov.T))
        return v * np.sqrt(np.clip(w, 0.0, None))


def check_policy(model: MjlsModel, policy: Policy) -> None:
    T, N, n_x, n_u = model.horizon, model.num_modes, model.n_x, model.n_u
    want = {"gains": (T, N, n_u, n_x), "feedforward": (T, N, n_u), "anchors": (T, N, n_x)}
    for name, shape in want.items():
        got = getattr(policy, name).shape
        if got != shape:
            raise ValueError(f"policy {name} has shape {got}, model needs {shape}")


def sample_trajectories(model: MjlsModel, policy: Policy, config: SimulationConfig) -> Samples:
    """Draw ``config.num_samples`` closed-loop trajectories.

    ``u_k = ff_k(r_k) + K_k(r_k) (x_k - anchor_k(r_k))``; the terminal mode
    ``r_T`` is sampled too so partial moments at ``k = T`` are available.
    """
    check_policy(model, policy)
    M, T, N = int(config.num_samples), model.horizon, model.num_modes
    rng = rng_streams(config.seed)
    r0 = np.searchsorted(np.cumsum(model.rho0), rng["initial_mode"].random(M), side="right")
    r0 = np.minimum(r0, N - 1)
    chol = _cov_factor(model.sigma0)
    x0 = model.mu0 + rng["initial_state"].standard_normal((M, model.n_x)) @ chol.T
    w = np.asarray(config.noise_hook()(rng["process_noise"], (M, T, model.n_w)), dtype=float)
    if w.shape != (M, T, model.n_w):
        raise ValueError(f"noise hook returned shape {w.shape}, expected {(M, T, model.n_w)}")
    jump = rng["mode_jumps"].random((M, T))
    cum = np.cumsum(model.transition, axis=1)
    x, r, u = _kernels.simulate(model.a, model.b, model.g, model.bias, policy.gains,
                                policy.feedforward, policy.anchors, cum, x0, r0, w, jump,
                                use_numba=config.use_numba)
    return Samples(x=x, r=r, u=u, seed=int(config.seed), noise_model=config.noise_name)


def sample_trajectory(model: MjlsModel, policy: Policy, seed: int = 0):
    """One trajectory: ``(x_0..x_T, r_0..r_T, u_0..u_{T-1})``."""
    s = sample_trajectories(model, policy, SimulationConfig(1, seed))
    return s.x[0], s.r[0], s.u[0]


def write_samples_csv(samples: Samples, path) -> None:
    """One row per (sample, k); the control columns are empty at ``k = T``."""
    M, T1, n_x = samples.x.shape
    n_u = samples.u.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "k", "mode"] + [f"x{c}" for c in range(n_x)]
                   + [f"u{c}" for c in range(n_u)])
        for s in range(M):
            for k in range(T1):
                u = [repr(float(v)) for v in samples.u[s, k]] if k < T1 - 1 else [""] * n_u
                w.writerow([s, k, int(samples.r[s, k])]
                           + [repr(float(v)) for v in samples.x[s, k]] + u)
