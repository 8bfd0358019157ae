#!/usr/bin/env python3
"""Time the hot kernels under both backends.

Runs the binary16 codec, the half-accumulator sum, and top-k selection
through gradsim.backends.numpy_backend and gradsim.backends.numba_backend
side by side, checks they agree bit-for-bit, and prints a timing table.

The package itself picks one backend at import time via GRADSIM_BACKEND
(numba | numpy | auto); this script imports both implementations directly
and is unaffected by that flag.

Usage: python3 benchmarks/bench_kernels.py [--size N] [--repeats R]
"""
import argparse
import time

import numpy as np

from gradsim.backends import numpy_backend

try:
    from gradsim.backends import numba_backend
except ImportError:
    numba_backend = None


def _inputs(size, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(size)
    f32_bits = values.astype(np.float32).view(np.uint32)
    f16_bits = numpy_backend.f32_bits_to_f16_bits(f32_bits)
    return values, f32_bits, f16_bits


def _time(fn, repeats):
    fn()  # warmup; compiles the numba kernels on first call
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=1_000_000,
                        help="vector length (default 1e6)")
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions, best-of (default 5)")
    args = parser.parse_args(argv)

    values, f32_bits, f16_bits = _inputs(args.size)
    k = max(1, args.size // 100)
    cases = [
        ("f16_bits_to_f32_bits", lambda b: b.f16_bits_to_f32_bits(f16_bits)),
        ("f32_bits_to_f16_bits", lambda b: b.f32_bits_to_f16_bits(f32_bits)),
        ("half_sum_bits", lambda b: b.half_sum_bits(f16_bits[:65536])),
        ("topk_magnitude_indices", lambda b: b.topk_magnitude_indices(values, k)),
    ]

    if numba_backend is None:
        print("numba backend unavailable; timing the numpy fallback only")

    print(f"size={args.size}, k={k}, best of {args.repeats}")
    header = f"{'kernel':<24}{'numpy':>12}{'numba':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, call in cases:
        t_np = _time(lambda: call(numpy_backend), args.repeats)
        if numba_backend is None:
            print(f"{name:<24}{t_np * 1e3:>10.3f}ms{'-':>12}{'-':>10}")
            continue
        a = call(numpy_backend)
        b = call(numba_backend)
        assert np.array_equal(a, b), f"{name}: backends disagree"
        t_nb = _time(lambda: call(numba_backend), args.repeats)
        print(f"{name:<24}{t_np * 1e3:>10.3f}ms{t_nb * 1e3:>10.3f}ms"
              f"{t_np / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
