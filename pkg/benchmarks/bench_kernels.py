"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

from limitless.workloads import _kernels_py

try:
    from limitless.workloads import _kernels as _compiled
except ImportError:
    _compiled = None


def cases(impl):
    a = impl.splitmix_int32(1, 64 * 64)
    b = impl.splitmix_int32(2, 64 * 64)
    return {
        "factor_block(999999937, 20000 probes)": lambda: impl.factor_block(999_999_937, 2, 20_000),
        "splitmix_int32(50000)": lambda: impl.splitmix_int32(7, 50_000),
        "matmul_row(64x64, all rows)": lambda: [impl.matmul_row(a, b, 64, i) for i in range(64)],
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    ns = p.parse_args()
    impls = {"python": _kernels_py}
    if _compiled is not None:
        impls["compiled"] = _compiled
    else:
        print("compiled kernels not built; timing the fallback only")
    timings = {}
    for name, impl in impls.items():
        for label, fn in cases(impl).items():
            timings[(label, name)] = min(timeit.repeat(fn, number=1, repeat=ns.repeat))
    print(f"{'kernel':40s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for label in cases(_kernels_py):
        py = timings[(label, "python")] * 1000
        if "compiled" in impls:
            cc = timings[(label, "compiled")] * 1000
            print(f"{label:40s} {py:10.2f} {cc:12.3f} {py / cc:7.1f}x")
        else:
            print(f"{label:40s} {py:10.2f} {'-':>12s} {'-':>8s}")


if __name__ == "__main__":
    main()
