"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""

import argparse
import timeit

import numpy as np

from prunelab import _fallback
from prunelab.corpus import bundled_corpus_path
from prunelab.tokenizer import RESERVED, _chunks

try:
    from prunelab import _kernels
except ImportError:
    _kernels = None


def jacobi_case(n):
    a0 = np.random.default_rng(0).normal(size=(n, n))

    def run(mod):
        a, v = a0.copy(), np.eye(n)
        mod.jacobi_rotate(a, v, 1e-15, 80)

    return run


def bpe_case(n_lines, n_merges):
    counts = {}
    with open(bundled_corpus_path(), encoding="utf-8") as fh:
        for line, _ in zip(fh, range(n_lines)):
            for chunk in _chunks(line.rstrip("\n")):
                counts[chunk] = counts.get(chunk, 0) + 1
    seq, weight = [], []
    for word, c in counts.items():
        seq.extend(b + len(RESERVED) for b in word)
        seq.append(-1)
        weight.extend([c] * (len(word) + 1))
    seq, weight = np.asarray(seq, np.int32), np.asarray(weight, np.int64)

    def run(mod):
        mod.bpe_train(seq.copy(), weight.copy(), n_merges, 260)

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    cases = [
        ("jacobi 32x32", jacobi_case(32)),
        ("jacobi 64x64", jacobi_case(64)),
        ("bpe 10k lines, 500 merges", bpe_case(10000, 500)),
    ]
    print(f"{'kernel':28s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}")
    for label, run in cases:
        py = min(timeit.repeat(lambda: run(_fallback), number=1, repeat=args.repeat))
        if _kernels is None:
            print(f"{label:28s} {py:10.4f} {'-':>10s} {'-':>8s}")
            continue
        cy = min(timeit.repeat(lambda: run(_kernels), number=1, repeat=args.repeat))
        print(f"{label:28s} {py:10.4f} {cy:10.4f} {py / cy:8.1f}")


if __name__ == "__main__":
    main()
