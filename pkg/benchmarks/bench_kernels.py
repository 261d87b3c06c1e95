"""Benchmark the compiled sequence-matching kernels against the numpy
fallback on extraction-shaped workloads.

Run: python3 benchmarks/bench_kernels.py [--trials N]
"""

import argparse
import time

import numpy as np

from treesum import _kernels_py

try:
    from treesum import _kernels
except ImportError:
    _kernels = None

from treesum.kernels import ngram_counts


def timeit(fn, trials):
    start = time.perf_counter()
    for _ in range(trials):
        fn()
    return (time.perf_counter() - start) / trials


def bench_lcs(rng, trials):
    """Oracle extraction shape: ~40-token candidates vs ~60-token gold."""
    cases = [
        (rng.integers(0, 300, size=40), rng.integers(0, 300, size=60))
        for _ in range(200)
    ]

    def run(impl):
        for a, b in cases:
            impl.lcs_length(a, b)

    return {"cases": len(cases), "pure": timeit(lambda: run(_kernels_py), trials),
            "compiled": timeit(lambda: run(_kernels), trials) if _kernels else None}


def bench_overlap(rng, trials):
    """Beam-search shape: selected-set unigram counts vs instance reviews."""
    ref = ngram_counts(rng.integers(0, 400, size=800), 1)
    cands = [ngram_counts(rng.integers(0, 400, size=120), 1) for _ in range(500)]

    def run(impl):
        for keys, counts in cands:
            impl.clipped_overlap(keys, counts, ref[0], ref[1])

    return {"cases": len(cands), "pure": timeit(lambda: run(_kernels_py), trials),
            "compiled": timeit(lambda: run(_kernels), trials) if _kernels else None}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'benchmark':<22}{'batch':>8}{'pure (ms)':>12}{'compiled (ms)':>15}{'speedup':>9}")
    for name, bench in (("lcs_length", bench_lcs), ("clipped_overlap", bench_overlap)):
        result = bench(rng, args.trials)
        pure_ms = result["pure"] * 1e3
        if result["compiled"] is None:
            print(f"{name:<22}{result['cases']:>8}{pure_ms:>12.2f}{'n/a':>15}{'n/a':>9}")
            continue
        compiled_ms = result["compiled"] * 1e3
        print(
            f"{name:<22}{result['cases']:>8}{pure_ms:>12.2f}{compiled_ms:>15.2f}"
            f"{pure_ms / compiled_ms:>8.1f}x"
        )
    if _kernels is None:
        print("\ncompiled extension not available; showing fallback only")


if __name__ == "__main__":
    main()
