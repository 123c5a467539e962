"""Compare the compiled and numpy index kernels.

    python3 benchmarks/bench_kernels.py [--n 100000] [--m 8] [--kc 256] [--k 100] [--repeat 20]
"""

import argparse
import statistics
import time

import numpy as np

from fastslow import _kernels


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--kc", type=int, default=256)
    ap.add_argument("--k", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    codes = rng.integers(0, args.kc, size=(args.n, args.m)).astype(np.uint8 if args.kc <= 256 else np.uint16)
    tables = rng.normal(size=(args.m, args.kc))
    scores = rng.normal(size=args.n)
    impls = _kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; timing the numpy kernels only")
    print(f"N={args.n} M={args.m} Kc={args.kc} k={args.k}, median of {args.repeat} runs")
    print(f"{'backend':<8} {'adc_scan ms':>12} {'topk ms':>10}")
    for name, mod in impls.items():
        adc = timeit(lambda: mod.adc_scan(codes, tables), args.repeat)
        top = timeit(lambda: mod.topk_desc(scores, args.k), args.repeat)
        print(f"{name:<8} {adc:>12.3f} {top:>10.3f}")
    ref = impls["python"]
    for name, mod in impls.items():
        same = (np.array_equal(mod.adc_scan(codes, tables), ref.adc_scan(codes, tables))
                and np.array_equal(mod.topk_desc(scores, args.k), ref.topk_desc(scores, args.k)))
        print(f"{name}: outputs identical to numpy reference: {same}")


if __name__ == "__main__":
    main()
