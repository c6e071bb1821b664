"""Pure numpy versions of the compiled kernels (same results, same ordering)."""

import numpy as np


def jacobi_rotate(a, v, tol, max_sweeps):
    m, n = a.shape
    for sweep in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai, aj = a[:, i], a[:, j]
                alpha = float(ai @ ai)
                beta = float(aj @ aj)
                gamma = float(ai @ aj)
                if alpha == 0.0 or beta == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                x, y = ai.copy(), aj.copy()
                a[:, i] = c * x - s * y
                a[:, j] = s * x + c * y
                x, y = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * x - s * y
                v[:, j] = s * x + c * y
        if not rotated:
            return sweep + 1
    return max_sweeps


def bpe_train(seq, weight, n_merges, next_id):
    seq = np.asarray(seq, dtype=np.int32)
    weight = np.asarray(weight, dtype=np.int64)
    M = next_id + n_merges
    merges = []
    for r in range(n_merges):
        left, right = seq[:-1].astype(np.int64), seq[1:].astype(np.int64)
        valid = (left >= 0) & (right >= 0)
        if not valid.any():
            break
        keys = left[valid] * M + right[valid]
        uniq, inv = np.unique(keys, return_inverse=True)
        counts = np.bincount(inv, weights=weight[:-1][valid])
        best_key = int(uniq[int(np.argmax(counts))])
        a, b = divmod(best_key, M)
        merges.append((a, b))
        hits = np.flatnonzero((seq[:-1] == a) & (seq[1:] == b))
        if a == b and hits.size > 1:
            keep, last = [], -2
            for p in hits.tolist():
                if p >= last + 2:
                    keep.append(p)
                    last = p
            hits = np.asarray(keep, dtype=np.int64)
        seq[hits] = next_id + r
        seq = np.delete(seq, hits + 1)
        weight = np.delete(weight, hits + 1)
    return np.asarray(merges, dtype=np.int32).reshape(-1, 2)
