"""Compare the compiled kernels with the NumPy fallback, plus one implicit step.

Usage: python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from krflow import _kernels_py, flow, kernels


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", type=int, default=8000)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.size
    a = rng.standard_normal(n)
    a11, a22 = rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n)
    a12 = rng.uniform(-0.4, 0.4, n)
    indptr = np.arange(0, 19 * n + 1, 19, dtype=np.int64)
    coefs = rng.standard_normal((3, n))
    data = rng.standard_normal((3, 19 * n))
    cols = rng.integers(0, n, 19 * n).astype(np.int32)
    indptr32 = indptr.astype(np.int32)

    cases = {
        "pairwise_sum": lambda m: m.pairwise_sum(a),
        "sym2_inverse": lambda m: m.sym2_inverse(a11, a12, a22),
        "row_scaled_sum": lambda m: m.row_scaled_sum(coefs, data, indptr),
        "centred_matvec": lambda m: m.centred_matvec(data[0], cols, indptr32, a),
    }
    compiled = kernels.compiled_kernels()
    print(f"{'kernel':<16}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, call in cases.items():
        tp = bench(lambda: call(_kernels_py), args.repeat) * 1e3
        if compiled is None:
            print(f"{name:<16}{tp:12.3f}{'n/a':>13}{'':>9}")
            continue
        tc = bench(lambda: call(compiled), args.repeat) * 1e3
        print(f"{name:<16}{tp:12.3f}{tc:13.3f}{tp / tc:9.1f}")

    cfg = flow.FlowConfig(preset="blowup3", amplitude=0.2, c0_policy="zero")
    prob = flow.build_problem(cfg)
    st = flow.init_state(cfg, prob)
    cache = flow.ChordCache()
    flow.step(st, cfg, prob, cache=cache)
    t = bench(lambda: flow.step(st, cfg, prob, cache=cache), max(3, args.repeat // 4))
    print(f"\nimplicit step, blowup3 ({prob.grid.size} nodes, backend {kernels.BACKEND}): {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
