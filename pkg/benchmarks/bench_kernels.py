"""Benchmark the numba kernels against their numpy fallbacks.

Both variants are importable side by side (the ``*_loop`` functions are the
jitted ones), so one process times both regardless of NOISYPROP_BACKEND.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints the median wall time per call and the speedup, and checks that the two
paths agree to 1e-12 on every benchmark input.
"""

import argparse
import time

import numpy as np

from noisyprop import kernels
from noisyprop._backend import HAS_NUMBA
from noisyprop.activations import DEFAULT_RULE


def _median_time(fn, repeat):
    fn()  # warm-up, includes JIT compilation for the numba path
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    h = rng.standard_normal((1000, 500))
    eps = np.where(rng.random(h.shape) < 0.6, 1 / 0.6, 0.0)
    a = rng.standard_normal((1000, 100))
    b = 0.5 * a + rng.standard_normal((1000, 100))
    x, w = DEFAULT_RULE.legendre
    pair = (2.0, 1.5, 0.3, np.sqrt(1 - 0.09), 0.1, False, x, w, kernels.Z_MAX)
    return [
        ("activate_corrupt relu+dropout 1000x500",
         lambda: kernels.activate_corrupt_loop(h, eps, np.empty_like(h), kernels.RECTIFIER, 0.0,
                                               kernels.NOISE_MULT),
         lambda: kernels.activate_corrupt_numpy(h, eps, np.empty_like(h), kernels.RECTIFIER, 0.0,
                                                kernels.NOISE_MULT)),
        ("activate_corrupt tanh+additive 1000x500",
         lambda: kernels.activate_corrupt_loop(h, eps, np.empty_like(h), kernels.TANH, 0.0,
                                               kernels.NOISE_ADD),
         lambda: kernels.activate_corrupt_numpy(h, eps, np.empty_like(h), kernels.TANH, 0.0,
                                                kernels.NOISE_ADD)),
        ("column_second_moment 1000x500",
         lambda: kernels.column_second_moment_loop(h),
         lambda: kernels.column_second_moment_numpy(h)),
        ("column_correlation 1000x100",
         lambda: kernels.column_correlation_loop(a, b),
         lambda: kernels.column_correlation_numpy(a, b)),
        ("rectifier_pair quadrature (101 nodes/piece)",
         lambda: kernels.rectifier_pair_loop(*pair),
         lambda: kernels.rectifier_pair_numpy(*pair)),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if not HAS_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':46s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, slow in cases(rng):
        diff = np.max(np.abs(np.asarray(fast()) - np.asarray(slow())))
        if diff > 1e-12:
            raise SystemExit(f"{name}: backends disagree by {diff:.3e}")
        t_fast = _median_time(fast, args.repeat)
        t_slow = _median_time(slow, args.repeat)
        print(f"{name:46s} {1e3 * t_fast:10.3f} {1e3 * t_slow:10.3f} {t_slow / t_fast:8.2f}x")


if __name__ == "__main__":
    main()
