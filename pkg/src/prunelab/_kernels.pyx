# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: one-sided Jacobi SVD sweeps and BPE merge training."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def jacobi_rotate(double[:, ::1] a, double[:, ::1] v, double tol, int max_sweeps):
    """Orthogonalize the columns of ``a`` in place (cyclic by row order), accumulating
    the right rotations into ``v``. Returns the number of sweeps used."""
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1], i, j, k
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y
    cdef int sweep, rotated
    for sweep in range(max_sweeps):
        rotated = 0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    alpha += a[k, i] * a[k, i]
                    beta += a[k, j] * a[k, j]
                    gamma += a[k, i] * a[k, j]
                if alpha == 0.0 or beta == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    x = a[k, i]
                    y = a[k, j]
                    a[k, i] = c * x - s * y
                    a[k, j] = s * x + c * y
                for k in range(n):
                    x = v[k, i]
                    y = v[k, j]
                    v[k, i] = c * x - s * y
                    v[k, j] = s * x + c * y
        if not rotated:
            return sweep + 1
    return max_sweeps


def bpe_train(cnp.int32_t[::1] seq, cnp.int64_t[::1] weight, int n_merges, int next_id):
    """Greedy pair merging over a flat symbol stream (words separated by -1).

    Each round merges the most frequent adjacent pair (ties: smallest
    (left, right)). ``seq``/``weight`` are compacted in place. Returns an
    (n, 2) int32 array of merged pairs, n <= n_merges.
    """
    cdef Py_ssize_t L = seq.shape[0], i, j, idx, ntouched
    cdef long long M = next_id + n_merges
    cdef cnp.int64_t[::1] counts = np.zeros(M * M, dtype=np.int64)
    cdef cnp.int64_t[::1] touched = np.empty(max(L, 1), dtype=np.int64)
    cdef cnp.int32_t[:, ::1] merges = np.empty((n_merges, 2), dtype=np.int32)
    cdef long long key, best_key
    cdef cnp.int64_t best
    cdef cnp.int32_t a, b, new_id
    cdef int r, done = 0
    for r in range(n_merges):
        ntouched = 0
        for i in range(L - 1):
            a = seq[i]
            b = seq[i + 1]
            if a < 0 or b < 0:
                continue
            key = a * M + b
            if counts[key] == 0:
                touched[ntouched] = key
                ntouched += 1
            counts[key] += weight[i]
        if ntouched == 0:
            break
        best = -1
        best_key = -1
        for idx in range(ntouched):
            key = touched[idx]
            if counts[key] > best or (counts[key] == best and key < best_key):
                best = counts[key]
                best_key = key
        for idx in range(ntouched):
            counts[touched[idx]] = 0
        a = <cnp.int32_t>(best_key // M)
        b = <cnp.int32_t>(best_key % M)
        new_id = next_id + r
        merges[r, 0] = a
        merges[r, 1] = b
        done = r + 1
        i = 0
        j = 0
        while i < L:
            if i + 1 < L and seq[i] == a and seq[i + 1] == b:
                seq[j] = new_id
                weight[j] = weight[i]
                i += 2
            else:
                seq[j] = seq[i]
                weight[j] = weight[i]
                i += 1
            j += 1
        L = j
    return np.asarray(merges[:done]).copy()
