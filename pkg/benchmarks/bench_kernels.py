"""Time the hot kernels under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per (kernel, backend) with the best-of-``repeat`` wall time
and the max absolute difference between the two backends' outputs.
"""

import argparse
import time

import numpy as np

from sparsecast import kernels


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    B, T, C = 128, 64, 8
    x = rng.normal(size=(B, T, C))
    w = rng.normal(size=(2, C, C))
    b = rng.normal(size=C)
    g = rng.normal(size=(B, T, C))
    y = rng.poisson(0.5, size=(2000, 156)).astype(np.float64)
    n = 20000
    series = rng.integers(0, 2000, n)
    fcds = rng.integers(13, 140, n)
    leads = np.array([1, 1, 1, 1, 2, 3, 4, 5], dtype=np.int64)
    spans = np.array([1, 2, 4, 8, 1, 1, 1, 1], dtype=np.int64)
    sig = rng.poisson(5.0, size=100).astype(np.float64)
    taps = 0.85 ** np.arange(24)
    return {
        "conv_forward": lambda: kernels.causal_conv_forward(x, w, b, 4),
        "conv_backward": lambda: kernels.causal_conv_backward(x, w, g, 4),
        "trailing_sum": lambda: kernels.trailing_sum(y, 52),
        "span_targets": lambda: kernels.span_targets(y, fcds, series, leads, spans),
        "causal_filter": lambda: kernels.causal_filter(sig, taps / taps.sum()),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    kernels.warmup()
    work = cases(np.random.default_rng(0))
    print(f"{'kernel':<15} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, fn in work.items():
        timings, outs = {}, {}
        for backend in ("numba", "numpy"):
            prev = kernels.set_backend(backend)
            try:
                outs[backend] = fn()
                timings[backend] = _best(fn, args.repeat)
            finally:
                kernels.set_backend(prev)
        a, b = outs["numba"], outs["numpy"]
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(u - v))) for u, v in zip(a, b))
        speed = timings["numpy"] / timings["numba"]
        print(f"{name:<15} {1e3 * timings['numba']:>10.3f} {1e3 * timings['numpy']:>10.3f} {speed:>7.2f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
