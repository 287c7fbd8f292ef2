import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from lograval.errors import ConvergenceError, DimensionError, SingularMatrixError
from lograval.numerics import (
    EigenDecomposition,
    kron,
    solve_damped,
    spearman,
    sym_eig,
    unvec,
    vec,
)


def spd(n, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    return m @ m.T + 1e-3 * np.eye(n)


# --- kron ---


def test_kron_identity_scalar():
    b = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(kron([[1.0]], b), b)


def test_kron_unit_selectors():
    np.testing.assert_array_equal(kron([[1.0, 0.0]], [[0.0, 1.0]]), [[0, 1, 0, 0]])


def test_kron_diagonal():
    np.testing.assert_array_equal(kron(np.diag([1.0, 4.0]), np.diag([2.0, 3.0])), np.diag([2, 3, 8, 12]))


def test_kron_index_formula():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 5))
    k = kron(a, b)
    assert k.shape == (8, 15)
    for i, j, p, q in [(0, 0, 0, 0), (1, 2, 3, 4), (1, 0, 2, 3)]:
        assert k[i * 4 + p, j * 5 + q] == a[i, j] * b[p, q]


def test_kron_matches_numpy():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((2, 4))
    np.testing.assert_array_equal(kron(a, b), np.kron(a, b))


def test_kron_rejects_non_finite():
    with pytest.raises(ValueError):
        kron([[np.nan]], [[1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_kron_mixed_product(m, n, p, q, r, s, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, n)), rng.standard_normal((p, q))
    c, d = rng.standard_normal((n, r)), rng.standard_normal((q, s))
    np.testing.assert_allclose(kron(a, b) @ kron(c, d), kron(a @ c, b @ d), atol=1e-10)


def test_vec_is_column_major():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(vec(m), [1, 3, 2, 4])
    np.testing.assert_array_equal(unvec(vec(m), 2, 2), m)


def test_vec_outer_product_identity():
    u, v = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0])
    np.testing.assert_array_equal(vec(np.outer(u, v)), np.kron(v, u))


# --- sym_eig ---


def test_sym_eig_diagonal():
    e = sym_eig(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(e.values, [3, 1])
    np.testing.assert_allclose(e.vectors, np.eye(2), atol=1e-14)


def test_sym_eig_diagonal_reordered():
    e = sym_eig(np.diag([1.0, 3.0]))
    np.testing.assert_allclose(e.values, [3, 1])
    np.testing.assert_allclose(np.abs(e.vectors), [[0, 1], [1, 0]], atol=1e-14)


def test_sym_eig_textbook_2x2():
    e = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(e.values, [3, 1], atol=1e-14)
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(e.vectors[:, 0], [s, s], atol=1e-14)
    np.testing.assert_allclose(e.vectors[:, 1], [s, -s], atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 8, 17, 40])
def test_sym_eig_reconstructs_spd(n):
    a = spd(n, seed=n)
    e = sym_eig(a, method="jacobi")
    rel = np.linalg.norm(e.reconstruct() - a) / np.linalg.norm(a)
    assert rel < 1e-8
    np.testing.assert_allclose(e.vectors.T @ e.vectors, np.eye(n), atol=1e-10)
    assert np.all(np.diff(e.values) <= 0)
    np.testing.assert_allclose(e.values.sum(), np.trace(a), rtol=1e-8)


def test_sym_eig_matches_lapack_values():
    a = spd(12, seed=3)
    np.testing.assert_allclose(sym_eig(a).values, np.linalg.eigvalsh(a)[::-1], rtol=1e-10)


@pytest.mark.parametrize("rank", [0, 1, 5])
def test_sym_eig_rank_deficient(rank):
    rng = np.random.default_rng(rank)
    m = rng.standard_normal((10, rank))
    a = m @ m.T
    e = sym_eig(a, method="jacobi")
    assert np.linalg.norm(e.reconstruct() - a) <= 1e-8 * max(np.linalg.norm(a), 1.0)
    np.testing.assert_allclose(e.vectors.T @ e.vectors, np.eye(10), atol=1e-10)


def test_sym_eig_large_uses_lapack_with_same_conventions():
    a = spd(150, seed=4)
    e = sym_eig(a)
    assert np.all(np.diff(e.values) <= 0)
    assert np.linalg.norm(e.reconstruct() - a) / np.linalg.norm(a) < 1e-8
    first = e.vectors[np.argmax(np.abs(e.vectors) > 1e-12, axis=0), np.arange(150)]
    assert np.all(first > 0)


def test_sym_eig_sign_convention():
    e = sym_eig(spd(6, seed=5))
    for j in range(6):
        col = e.vectors[:, j]
        assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0


def test_sym_eig_rejects_non_symmetric():
    with pytest.raises(ValueError, match="symmetric"):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sym_eig_rejects_non_square():
    with pytest.raises(DimensionError):
        sym_eig(np.ones((2, 3)))


def test_sym_eig_reports_residual_on_sweep_cap():
    with pytest.raises(ConvergenceError) as info:
        sym_eig(spd(8, seed=6), max_sweeps=1, method="jacobi")
    assert info.value.residual > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10**6))
def test_sym_eig_trace_property(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n))
    a = m + m.T
    e = sym_eig(a)
    assert abs(e.values.sum() - np.trace(a)) <= 1e-8 * max(1.0, np.abs(a).sum())


# --- solve_damped ---


def test_solve_damped_diagonal():
    e = sym_eig(np.diag([1.0, 3.0]))
    np.testing.assert_allclose(solve_damped(e, 0.2, [1.0, 1.0]), [1 / 1.2, 1 / 3.2], rtol=1e-14)


def test_solve_damped_identity_no_damping():
    g = np.array([0.3, -2.0, 5.0])
    np.testing.assert_allclose(solve_damped(sym_eig(np.eye(3)), 0.0, g), g)


def test_solve_damped_large_damping_vanishes():
    out = solve_damped(sym_eig(np.diag([1.0, 3.0])), 1e9, [1.0, 1.0])
    assert np.all(np.abs(out) < 1e-8)


def test_solve_damped_singular():
    e = EigenDecomposition(np.array([1.0, 0.0]), np.eye(2))
    with pytest.raises(SingularMatrixError):
        solve_damped(e, 0.0, [1.0, 1.0])


def test_solve_damped_negative_damping_rejected():
    with pytest.raises(ValueError):
        solve_damped(sym_eig(np.eye(2)), -1.0, [1.0, 1.0])


def test_solve_damped_dimension_mismatch():
    with pytest.raises(DimensionError):
        solve_damped(sym_eig(np.eye(2)), 0.1, [1.0, 1.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.floats(0.0, 10.0), st.integers(0, 10**6))
def test_solve_damped_matches_direct_solve(n, lam, seed):
    a = spd(n, seed)
    g = np.random.default_rng(seed + 1).standard_normal(n)
    x = solve_damped(sym_eig(a), lam, g)
    ref = np.linalg.solve(a + lam * np.eye(n), g)
    assert np.linalg.norm(x - ref) <= 1e-8 * np.linalg.norm(ref)


def test_solve_damped_matrix_rhs():
    a = spd(5, 7)
    g = np.random.default_rng(8).standard_normal((5, 3))
    np.testing.assert_allclose(solve_damped(sym_eig(a), 0.5, g), np.linalg.solve(a + 0.5 * np.eye(5), g), rtol=1e-8)


# --- spearman ---


def test_spearman_perfect():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [30, 20, 10]) == pytest.approx(-1.0)


def test_spearman_rank_pearson():
    assert spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6)


def test_spearman_ties_match_scipy():
    a, b = [1, 2, 2, 3, 5, 5], [3, 1, 2, 2, 8, 0]
    assert spearman(a, b) == pytest.approx(sps.spearmanr(a, b).statistic, abs=1e-12)


def test_spearman_constant_input():
    with pytest.raises(ValueError):
        spearman([1, 1, 1], [1, 2, 3])


def test_spearman_too_short_or_mismatched():
    with pytest.raises(ValueError):
        spearman([1], [2])
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=3, max_size=30, unique=True), st.integers(0, 10**6))
def test_spearman_monotone_invariance(a, seed):
    a = np.array(a, dtype=float)
    b = np.random.default_rng(seed).permutation(len(a)).astype(float)
    base = spearman(a, b)
    assert spearman(np.exp(a / 50), b) == pytest.approx(base, abs=1e-12)
    assert spearman(a, 3 * b**3 + 1) == pytest.approx(base, abs=1e-12)
    assert -1 - 1e-12 <= base <= 1 + 1e-12
