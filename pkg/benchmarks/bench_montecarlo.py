"""Time the Monte Carlo kernels with numba and with the numpy fallback.

    python benchmarks/bench_montecarlo.py [--samples 10000 100000] [--repeat 3]

Both engines receive identical pre-drawn inputs; the script also reports
the largest absolute difference between their outputs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from covsteer.model import benchmark_instance
from covsteer.montecarlo import _kernels
from covsteer.montecarlo.simulate import rng_streams
from covsteer.steering import run_algorithm1


def _inputs(model, policy, M, seed=0):
    rng = rng_streams(seed)
    T, N = model.horizon, model.num_modes
    r0 = np.minimum(np.searchsorted(np.cumsum(model.rho0), rng["initial_mode"].random(M),
                                    side="right"), N - 1)
    x0 = model.mu0 + rng["initial_state"].standard_normal((M, model.n_x)) @ \
        np.linalg.cholesky(model.sigma0).T
    w = rng["process_noise"].standard_normal((M, T, model.n_w))
    jump = rng["mode_jumps"].random((M, T))
    cum = np.cumsum(model.transition, axis=1)
    return (model.a, model.b, model.g, model.bias, policy.gains, policy.feedforward,
            policy.anchors, cum, x0, r0, w, jump)


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, nargs="+", default=[10_000, 100_000])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    model, cc = benchmark_instance()
    policy = run_algorithm1(model, cc).policy
    if not _kernels.HAVE_NUMBA:
        print("numba not importable; only the numpy path can be timed")

    # compile outside the timed region
    warm = _inputs(model, policy, 8)
    _kernels.simulate(*warm, use_numba=True)
    _kernels.bucket_sums(np.zeros((8, 7, 4)), np.zeros((8, 7), dtype=np.int64), 2, use_numba=True)

    print(f"{'kernel':<12}{'samples':>10}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}"
          f"{'max |diff|':>14}")
    for M in args.samples:
        inp = _inputs(model, policy, M)
        t_nb, (x_nb, r_nb, u_nb) = _best(lambda: _kernels.simulate(*inp, use_numba=True),
                                         args.repeat)
        t_np, (x_np, r_np, u_np) = _best(lambda: _kernels.simulate(*inp, use_numba=False),
                                         args.repeat)
        diff = max(np.abs(x_nb - x_np).max(), np.abs(u_nb - u_np).max(),
                   float(np.any(r_nb != r_np)))
        print(f"{'simulate':<12}{M:>10}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>10.1f}"
              f"{diff:>14.2e}")

        feats = (x_nb[:, :, :, None] * x_nb[:, :, None, :]).reshape(M, model.horizon + 1, -1)
        t_nb, a = _best(lambda: _kernels.bucket_sums(feats, r_nb, 2, use_numba=True),
                        args.repeat)
        t_np, b = _best(lambda: _kernels.bucket_sums(feats, r_nb, 2, use_numba=False),
                        args.repeat)
        rel = max(np.abs(p - q).max() / max(np.abs(q).max(), 1.0) for p, q in zip(a, b))
        print(f"{'bucket_sums':<12}{M:>10}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>10.1f}"
              f"{rel:>14.2e}")


if __name__ == "__main__":
    main()
