"""Time the numba metric kernels against their numpy/scipy fallbacks.

    python benchmarks/bench_kernels.py [--sizes 32 64 128] [--repeat 5]

Both implementations are called directly, so the DISCREFINE_DISABLE_NUMBA flag
does not matter here. The first numba call (JIT compile, or cache load) is
timed separately and excluded from the steady-state numbers.
"""
import argparse
import time
import timeit

import numpy as np

from discrefine import kernels


def blob(n, seed=0):
    rng = np.random.default_rng(seed)
    z, y, x = np.ogrid[:n, :n, :n]
    c = rng.uniform(0.3 * n, 0.7 * n, 3)
    r = 0.25 * n * (1 + 0.2 * np.sin(x / 3.0) * np.cos(y / 4.0))
    return ((z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2) < r**2


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    spacing = (1.0, 1.0, 1.5)
    small = blob(8)
    t0 = time.perf_counter()
    kernels.boundary_mask_numba(small)
    kernels.distance_to_set_numba(small, spacing)
    print(f"numba first call (compile or cache load): {time.perf_counter() - t0:.2f} s\n")

    print(f"{'kernel':<16}{'size':>6}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}  agree")
    for n in args.sizes:
        mask = blob(n, n)
        edge = kernels.boundary_mask_numpy(mask)
        pairs = [
            ("boundary", kernels.boundary_mask_numba, kernels.boundary_mask_numpy, (mask,)),
            ("distance", kernels.distance_to_set_numba, kernels.distance_to_set_numpy, (edge, spacing)),
        ]
        for name, fast, slow, a in pairs:
            agree = np.allclose(fast(*a), slow(*a), rtol=0, atol=1e-9)
            tf, ts = best_of(lambda: fast(*a), args.repeat), best_of(lambda: slow(*a), args.repeat)
            print(f"{name:<16}{n:>5}³{1e3 * tf:>12.2f}{1e3 * ts:>12.2f}{ts / tf:>9.2f}x  {agree}")


if __name__ == "__main__":
    main()
