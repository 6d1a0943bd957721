#!/usr/bin/env python3
"""Benchmark the similarity kernel: compiled extension vs numpy fallback
across matrix sizes, plus the background-masking ablation (pair counts and
wall-clock).

Usage: python benchmarks/bench_kernel.py [--dim 16] [--repeats 5]
       [--chunk-rows 256]
"""

import argparse
import time

import numpy as np

from ucd.mining import HAVE_COMPILED, contrast_pair_count, similarity_matrix

SIZES = [(64, 128), (128, 256), (512, 1024), (1024, 2048), (4096, 4608)]


def best_time(anchors, old, backend, chunk_rows, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        similarity_matrix(anchors, old, chunk_rows=chunk_rows, backend=backend)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dim", type=int, default=16)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--chunk-rows", type=int, default=256)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    backends = ["python"] + (["compiled"] if HAVE_COMPILED else [])
    print(f"backend sweep, dim {args.dim}, chunk_rows {args.chunk_rows}")
    header = f"{'rows':>6} {'cols':>6}" + "".join(f" {b:>12}" for b in backends)
    if HAVE_COMPILED:
        header += f" {'speedup':>8}"
    print(header)
    for n_r, n_m in SIZES:
        anchors = rng.normal(size=(n_r, args.dim))
        old = rng.normal(size=(n_m - n_r, args.dim))
        times = {b: best_time(anchors, old, b, args.chunk_rows, args.repeats)
                 for b in backends}
        line = f"{n_r:>6} {n_m:>6}" + "".join(
            f" {times[b] * 1e3:>10.2f}ms" for b in backends)
        if HAVE_COMPILED:
            line += f" {times['python'] / times['compiled']:>7.1f}x"
        print(line)

    # ablation analogue: dropping background pixels shrinks both the pair
    # count (closed form) and the measured kernel time
    n_anchor, n_old, n_bg = 4096, 512, 1024
    total = n_anchor + n_bg
    feats = rng.normal(size=(total, args.dim))
    old_feats = rng.normal(size=(n_old, args.dim))
    pairs_drop = contrast_pair_count(n_anchor, n_old)
    pairs_keep = contrast_pair_count(total, total)
    t_drop = best_time(feats[:n_anchor], old_feats, None, args.chunk_rows, args.repeats)
    t_keep = best_time(feats, feats, None, args.chunk_rows, args.repeats)
    print()
    print("background-masking ablation (default backend)")
    print(f"{'variant':<18} {'pairs':>12} {'seconds':>9}")
    print(f"{'drop background':<18} {pairs_drop:>12} {t_drop:9.3f}")
    print(f"{'keep background':<18} {pairs_keep:>12} {t_keep:9.3f}")
    print(f"pair reduction: {pairs_keep - pairs_drop} "
          f"({100 * (1 - pairs_drop / pairs_keep):.0f}%), "
          f"time reduction: {100 * (1 - t_drop / t_keep):.0f}%")


if __name__ == "__main__":
    main()
