import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from prunelab.factorization import (
    DegenerateLayerError,
    FactorizationError,
    MonotonicityError,
    adjusted_target_sparsity,
    densify,
    factorize,
    jacobi_svd,
    kept_rank,
    prune_factorized,
    refactorize_for_next_target,
)


def rel_frob(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.parametrize("w", [
    np.eye(4),
    np.outer([1.0, -2.0, 3.0], [0.5, 4.0]),
    np.random.default_rng(0).normal(size=(8, 5)),
    np.random.default_rng(1).normal(size=(5, 8)),
])
def test_full_rank_reconstruction(w):
    u, s, vt = jacobi_svd(w)
    assert rel_frob((u * s) @ vt, w) <= 1e-5
    np.testing.assert_allclose(s, np.linalg.svd(w, compute_uv=False), atol=1e-10)
    assert np.all(np.diff(s) <= 0)


def test_singular_vectors_are_orthonormal_and_signed():
    w = np.random.default_rng(2).normal(size=(9, 6))
    u, s, vt = jacobi_svd(w)
    np.testing.assert_allclose(u.T @ u, np.eye(6), atol=1e-10)
    np.testing.assert_allclose(vt @ vt.T, np.eye(6), atol=1e-10)
    assert all(col[np.argmax(np.abs(col))] > 0 for col in u.T)


def test_rank_deficient_input():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(7, 2)) @ rng.normal(size=(2, 6))
    u, s, vt = jacobi_svd(w)
    assert np.all(s[2:] < 1e-10)
    np.testing.assert_allclose((u * s) @ vt, w, atol=1e-10)


def test_bad_input():
    with pytest.raises(FactorizationError):
        jacobi_svd(np.array([[np.nan, 1.0]]))
    with pytest.raises(FactorizationError):
        jacobi_svd(np.ones(3))


@settings(max_examples=30, deadline=None, derandomize=True)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 10**6), st.data())
def test_magnitude_mask_is_eckart_young_optimal(a, b, seed, data):
    w = np.random.default_rng(seed).normal(size=(a, b))
    fl = factorize(w)
    r = fl.rank
    k = data.draw(st.integers(1, r))
    pruned = prune_factorized(fl, np.abs(fl.D), 1 - k / r)
    assert pruned.unmasked_rank == k
    sv = np.linalg.svd(w, compute_uv=False)
    optimal = np.sqrt(np.sum(sv[k:] ** 2))
    assert abs(np.linalg.norm(w - pruned.reconstruct()) - optimal) <= 1e-6 * max(1.0, np.linalg.norm(w))


def test_densify_drops_masked_channels():
    w = np.random.default_rng(4).normal(size=(6, 4)).astype(np.float32)
    fl = prune_factorized(factorize(w), np.arange(4.0), 0.5)
    u, v = densify(fl)
    assert u.shape == (6, 2) and v.shape == (2, 4)
    np.testing.assert_allclose(u.astype(np.float64) @ v, fl.reconstruct(), atol=1e-6)


def test_refactorize_matches_direct_svd_subspaces():
    rng = np.random.default_rng(5)
    u, v = rng.normal(size=(20, 4)), rng.normal(size=(4, 15))
    fl = refactorize_for_next_target(u, v)
    uu, ss, vvt = np.linalg.svd(u @ v)
    np.testing.assert_allclose(fl.D, ss[:4], rtol=1e-5)
    assert np.max(subspace_angles(fl.U.astype(np.float64), uu[:, :4])) < 1e-4
    assert np.max(subspace_angles(fl.V.T.astype(np.float64), vvt[:4].T)) < 1e-4
    np.testing.assert_allclose(fl.reconstruct(), u @ v, atol=1e-4)


def test_refactorize_shape_mismatch():
    with pytest.raises(FactorizationError):
        refactorize_for_next_target(np.ones((3, 2)), np.ones((3, 3)))


def test_square_512_at_95_percent_keeps_rank_12():
    assert kept_rank(512, 512, 0.95) == 12
    assert 512 * 12 * 2 + 12 <= 0.05 * 512 * 512 + 2 * 512 + 1


def test_equal_dimensions_at_zero_sparsity_halve_the_diagonal():
    assert adjusted_target_sparsity(64, 64, 0.0) == 0.5


def test_parameter_accounting_within_one_rank_unit():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a, b = (int(x) for x in rng.integers(2, 600, 2))
        s_t = float(rng.uniform(0, 0.99))
        k = kept_rank(a, b, s_t)
        assert 0 <= k <= min(a, b)
        assert abs(k * (a + b) + k - (1 - s_t) * a * b) <= a + b + 1


def test_pruning_the_diagonal_is_monotone_and_floored():
    fl = factorize(np.random.default_rng(7).normal(size=(5, 5)))
    half = prune_factorized(fl, np.abs(fl.D), 0.5)
    with pytest.raises(MonotonicityError):
        prune_factorized(half, np.abs(fl.D), 0.2)
    with pytest.raises(DegenerateLayerError):
        prune_factorized(fl, np.abs(fl.D), 0.99)


def test_input_is_not_modified():
    w = np.random.default_rng(8).normal(size=(6, 3))
    before = w.copy()
    jacobi_svd(w)
    np.testing.assert_array_equal(w, before)
