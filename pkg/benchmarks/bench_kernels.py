"""
Compare the compiled loop kernels with their numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 5]

With REROUTE_NUMBA=0 the ``*_loop`` functions run as plain Python, which is
mostly useful for seeing how much the compiler buys.
"""

import argparse
import timeit

import numpy as np

from reroute import kernels
from reroute._accel import JIT_ENABLED


def cases(rng):
    # pathway strings of a 4-layer, k=2 model, like the analysis module compares
    def pathway():
        return "-".join(",".join(str(e) for e in rng.choice(8, 2, replace=False)) for _ in range(4)).encode()

    pairs = [(pathway(), pathway()) for _ in range(500)]
    pairs = [(np.frombuffer(a, np.uint8).astype(np.int64), np.frombuffer(b, np.uint8).astype(np.int64)) for a, b in pairs]
    long_a, long_b = rng.integers(0, 12, 400), rng.integers(0, 12, 400)
    probs = rng.random((256, 8))
    sel = rng.integers(0, 8, (4096, 4, 2))
    return [
        ("levenshtein x500 (15 chars)",
         lambda: [kernels.levenshtein_loop(a, b) for a, b in pairs],
         lambda: [kernels.levenshtein_numpy(a, b) for a, b in pairs]),
        ("levenshtein 400x400",
         lambda: kernels.levenshtein_loop(long_a, long_b),
         lambda: kernels.levenshtein_numpy(long_a, long_b)),
        ("top-2 of 256x8",
         lambda: kernels.topk_rows_loop(probs, 2),
         lambda: kernels.topk_rows_numpy(probs, 2)),
        ("expert counts 4096x4x2",
         lambda: kernels.expert_counts_loop(sel, 8),
         lambda: kernels.expert_counts_numpy(sel, 8)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba enabled: {JIT_ENABLED}")
    print(f"{'kernel':30s} {'loop ms':>10s} {'numpy ms':>10s} {'loop/numpy':>11s}")
    for name, loop, vec in cases(rng):
        loop()  # compile / warm up
        vec()
        n = 3
        t_loop = min(timeit.repeat(loop, number=n, repeat=args.repeat)) / n * 1e3
        t_vec = min(timeit.repeat(vec, number=n, repeat=args.repeat)) / n * 1e3
        print(f"{name:30s} {t_loop:10.3f} {t_vec:10.3f} {t_loop / t_vec:11.2f}")


if __name__ == "__main__":
    main()
