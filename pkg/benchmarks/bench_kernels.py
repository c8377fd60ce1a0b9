"""Compare the numba and numpy kernel backends.

    python benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

Both backends are imported in one process (the numpy functions are always
available), so each row times identical inputs.  The first numba call is
excluded from timing; JIT compile cost is reported separately.
"""

import argparse
import time

import numpy as np

from bridgebench import _kernels as k


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=1_000_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    n = args.n
    rng = np.random.default_rng(0)
    ordinals = np.arange(n, dtype=np.uint64)
    sizes = rng.integers(1, 200_000, n)
    gw = rng.integers(0, 4, n)
    seq = rng.integers(0, n // 4 + 1, n)
    n_records = max(1, n // 100)

    cases = [
        ("uniform_batch", lambda f: f(7, 11, 0, 0, ordinals), "uniform_batch"),
        ("drop_probability", lambda f: f(sizes, 0.05, 1460), "drop_probability"),
        ("sensor_records", lambda f: f(n_records, 7, 11, 1, 3), "sensor_records"),
        ("duplicate_flags", lambda f: f(gw, seq), "duplicate_flags"),
    ]
    print(f"backend active by default: {k.BACKEND}; n={n}, best of {args.repeat}")
    print(f"{'kernel':<18} {'numpy s':>10} {'numba s':>10} {'speedup':>8} {'jit s':>8}")
    for label, call, name in cases:
        np_fn = getattr(k, f"{name}_np")
        nb_fn = getattr(k, f"{name}_nb", None)
        t_np = best_of(lambda: call(np_fn), args.repeat)
        if nb_fn is None:
            print(f"{label:<18} {t_np:>10.4f} {'-':>10} {'-':>8} {'-':>8}")
            continue
        t0 = time.perf_counter()
        first = call(nb_fn)
        jit = time.perf_counter() - t0
        assert np.array_equal(first, call(np_fn)), label
        t_nb = best_of(lambda: call(nb_fn), args.repeat)
        print(f"{label:<18} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>7.1f}x {jit:>8.2f}")


if __name__ == "__main__":
    main()
