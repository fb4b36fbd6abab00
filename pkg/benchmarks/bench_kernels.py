"""Time each hot kernel through its compiled and pure-numpy paths.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Both twins are called directly, so the result does not depend on the
TDTL_DISABLE_NUMBA flag. The first compiled call (JIT or cache load) is
reported separately.
"""
import argparse
import timeit

import numpy as np

from tdtl import adapt, features as F, linalg
from tdtl.data import synthetic_landmarks


def cases(scale):
    rng = np.random.default_rng(0)
    n = max(4, int(64 * scale))
    sym = rng.normal(size=(n, n))
    sym = sym + sym.T
    side = max(16, int(128 * scale))
    gray = rng.integers(0, 256, size=(side, side)).astype(np.int64)
    lbp_args = (gray, F.UNIFORM_BIN, F.NEIGHBOURS, F.region_edges(side - 2),
                F.region_edges(side - 2), F.LBP_GRID, F.LBP_BINS)
    img = gray.astype(np.float64)
    centres = F.landmark_centres(synthetic_landmarks(side), img.shape)
    train = rng.normal(size=(max(2, int(400 * scale)), 16))
    test = rng.normal(size=(max(2, int(400 * scale)), 16))
    return [
        (f"jacobi {n}x{n}", linalg._jacobi_numba, linalg._jacobi_numpy,
         lambda: (sym.copy(), 1e-12, 100)),
        (f"lbp {side}x{side}", F._lbp_hist_numba, F._lbp_hist_numpy, lambda: lbp_args),
        (f"sift {side}x{side}", F._sift_raw_numba, F._sift_raw_numpy,
         lambda: (img, centres, F.SIFT_SIGMA)),
        (f"1-nn {len(train)}x{len(test)}", adapt._nn1_numba, adapt._nn1_numpy,
         lambda: (train, test)),
    ]


def best_time(fn, make_args, repeat):
    return min(timeit.repeat(lambda: fn(*make_args()), number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--scale", type=float, default=1.0, help="problem size multiplier")
    args = parser.parse_args(argv)

    print(f"{'kernel':<20}{'first call s':>14}{'numba ms':>11}{'numpy ms':>11}{'speedup':>9}")
    for name, fast, slow, make_args in cases(args.scale):
        warm = timeit.timeit(lambda: fast(*make_args()), number=1)
        t_fast = best_time(fast, make_args, args.repeat)
        t_slow = best_time(slow, make_args, args.repeat)
        print(f"{name:<20}{warm:>14.2f}{t_fast * 1e3:>11.2f}{t_slow * 1e3:>11.2f}"
              f"{t_slow / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
