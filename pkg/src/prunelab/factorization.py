"""Low-rank U·D·M·V factorization of projection matrices.

``W (a×b) ≈ U (a×r) · diag(D ⊙ M) · V (r×b)`` where ``M`` is a binary mask
over the diagonal. Pruning flips entries of ``M`` to zero; densification
drops the masked rank channels and folds ``D`` into ``U``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class FactorizationError(ArithmeticError):
    pass


class DegenerateLayerError(ValueError):
    pass


class MonotonicityError(ValueError):
    """A pruning target would unmask something that is already pruned."""


def jacobi_svd(w: np.ndarray, tol: float = 1e-15, max_sweeps: int = 80, name: str = "matrix"):
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``(U, s, Vt)`` with ``s`` descending, ``U`` a×r, ``Vt`` r×b,
    r = min(a, b). Each left singular vector is signed so that its
    largest-magnitude component is positive.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or not np.all(np.isfinite(w)):
        raise FactorizationError(f"{name}: SVD input must be a finite 2-D array")
    flip = w.shape[0] < w.shape[1]
    a = np.array(w.T if flip else w, order="C")  # rotated in place; never alias the input
    n = a.shape[1]
    v = np.eye(n)
    sweeps = kernels.jacobi_rotate(a, v, tol, max_sweeps)
    if sweeps >= max_sweeps:
        raise FactorizationError(f"{name}: Jacobi SVD did not converge in {max_sweeps} sweeps")
    s = np.sqrt((a * a).sum(axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    a = a[:, order]
    v = v[:, order]
    left = np.zeros_like(a)
    nz = s > 0
    left[:, nz] = a[:, nz] / s[nz]
    # (left, s, v) with w_or_wT = left diag(s) v^T
    u_mat, vt = (v, left.T) if flip else (left, v.T)
    for j in range(len(s)):
        col = u_mat[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            u_mat[:, j] = -col
            vt[j] = -vt[j]
    return u_mat, s, vt


@dataclass
class FactorizedLayer:
    U: np.ndarray  # a×r
    D: np.ndarray  # r
    M: np.ndarray  # r, binary
    V: np.ndarray  # r×b
    origin_shape: tuple[int, int] = field(default=(0, 0))

    @property
    def rank(self) -> int:
        return int(self.D.shape[0])

    @property
    def unmasked_rank(self) -> int:
        return int(np.count_nonzero(self.M))

    @property
    def diagonal_sparsity(self) -> float:
        return 1.0 - self.unmasked_rank / self.rank

    def reconstruct(self) -> np.ndarray:
        dm = self.D.astype(np.float64) * self.M
        return (self.U.astype(np.float64) * dm) @ self.V.astype(np.float64)

    def effective_params(self) -> int:
        a, b = self.origin_shape
        k = self.unmasked_rank
        return k * (a + b) + k


def factorize(w: np.ndarray, name: str = "layer") -> FactorizedLayer:
    u, s, vt = jacobi_svd(w, name=name)
    return FactorizedLayer(
        U=u.astype(np.float32),
        D=s.astype(np.float32),
        M=np.ones(len(s), dtype=np.uint8),
        V=vt.astype(np.float32),
        origin_shape=tuple(np.shape(w)),
    )


def adjusted_target_sparsity(a: int, b: int, s_t: float) -> float:
    """Diagonal sparsity that makes a rank-masked a×b factorization hold
    ``(1 - s_t)·a·b`` parameters: ``1 - a(1 - s_t)/(a + b)``.

    The expression is asymmetric in (a, b): it is exact when the diagonal
    length equals ``b``. Pass the larger dimension as ``a`` for non-square
    matrices (see :func:`layer_target_sparsity`).
    """
    if not 0.0 <= s_t < 1.0:
        raise ValueError(f"s_t must lie in [0, 1), got {s_t}")
    return 1.0 - a * (1.0 - s_t) / (a + b)


def layer_target_sparsity(shape: tuple[int, int], s_t: float) -> float:
    a, b = shape
    return adjusted_target_sparsity(max(a, b), min(a, b), s_t)


def n_pruned(target: float, n: int) -> int:
    """floor(target * n), tolerant to representation error just below an integer."""
    return int(math.floor(target * n + 1e-9))


def n_kept_rank(s_hat: float, r: int) -> int:
    """Rank channels left at diagonal sparsity ``s_hat``: floor((1 - s_hat)·r)."""
    return int(math.floor((1.0 - s_hat) * r + 1e-9))


def prune_factorized(layer: FactorizedLayer, scores: np.ndarray, s_hat: float) -> FactorizedLayer:
    """Zero the lowest-scoring unmasked diagonal entries until only
    floor((1 - s_hat)·r) remain. Ties break toward the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    r = layer.rank
    keep = n_kept_rank(s_hat, r)
    have = layer.unmasked_rank
    if keep > have:
        raise MonotonicityError(
            f"diagonal target {s_hat} below current sparsity {1 - have / r}"
        )
    if keep < 1:
        raise DegenerateLayerError(
            f"diagonal target {s_hat} leaves no rank channel (rank floor is 1)"
        )
    m = layer.M.copy()
    live = np.flatnonzero(m)
    order = live[np.argsort(scores[live], kind="stable")]
    m[order[: have - keep]] = 0
    return FactorizedLayer(layer.U, layer.D, m, layer.V, layer.origin_shape)


def densify(layer: FactorizedLayer) -> tuple[np.ndarray, np.ndarray]:
    """Drop masked channels; returns (U' a×k with D folded in, V'' k×b)."""
    keep = np.flatnonzero(layer.M)
    if keep.size == 0:
        raise DegenerateLayerError("cannot densify a layer with zero unmasked rank")
    u = (layer.U[:, keep].astype(np.float64) * layer.D[keep].astype(np.float64)).astype(np.float32)
    return u, np.ascontiguousarray(layer.V[keep])


def refactorize_for_next_target(u: np.ndarray, v: np.ndarray, name: str = "layer") -> FactorizedLayer:
    """SVD of the product ``u @ v`` at rank k = u.shape[1] without forming it.

    Thin QR of both factors reduces the problem to a k×k core.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape[1] != v.shape[0]:
        raise FactorizationError(f"{name}: inner dimensions {u.shape} / {v.shape} disagree")
    qa, ra = np.linalg.qr(u)
    qb, rb = np.linalg.qr(v.T)
    cu, s, cvt = jacobi_svd(ra @ rb.T, name=name)
    left = qa @ cu
    right = cvt @ qb.T
    for j in range(len(s)):
        col = left[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            left[:, j] = -col
            right[j] = -right[j]
    return FactorizedLayer(
        U=left.astype(np.float32),
        D=s.astype(np.float32),
        M=np.ones(len(s), dtype=np.uint8),
        V=right.astype(np.float32),
        origin_shape=(u.shape[0], v.shape[1]),
    )


def kept_rank(a: int, b: int, s_t: float) -> int:
    """Unmasked rank after pruning an a×b factorization toward s_t."""
    return n_kept_rank(layer_target_sparsity((a, b), s_t), min(a, b))
