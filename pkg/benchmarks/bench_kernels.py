"""Time the numba and pure-numpy index kernels on the same random matrices.

    python3 benchmarks/bench_kernels.py --rows 1000 10000 100000 --dim 64

Both paths are checked to rank identically before timing.
"""

import argparse
import time

import numpy as np

from memforest import _accel


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--k", type=int, default=10)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if not _accel.HAS_NUMBA:
        print("numba unavailable (or MEMFOREST_DISABLE_NUMBA set); only the numpy path is timed")
    rng = np.random.default_rng(args.seed)
    print(f"{'rows':>8} {'dim':>4} {'numpy_ms':>10} {'numba_ms':>10} {'speedup':>8}")
    for n in args.rows:
        m = rng.standard_normal((n, args.dim))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        q = rng.standard_normal(args.dim)
        q /= np.linalg.norm(q)

        def run_numpy():
            s = _accel.cosine_scores_numpy(m, q)
            return _accel.top_candidates_numpy(s, args.k)

        t_np = best_of(run_numpy, args.repeat)
        if _accel.HAS_NUMBA:
            def run_numba():
                s = _accel.cosine_scores_numba(m, q)
                return _accel.top_candidates_numba(s, args.k)

            run_numba()  # compile outside the timed region
            assert set(run_numba()) == set(run_numpy()), "kernels disagree"
            t_nb = best_of(run_numba, args.repeat)
            print(f"{n:>8} {args.dim:>4} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>8.2f}")
        else:
            print(f"{n:>8} {args.dim:>4} {t_np * 1e3:>10.3f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
