"""Dense linear-algebra kernels shared by every other module.

Matrices are plain ``float64`` numpy arrays. Eigenvalues are always returned in
descending order, so "top-k" means the first ``k`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConvergenceError, DimensionError, SingularMatrixError

SYMMETRY_TOL = 1e-10
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
# Above this size the O(n^2)-per-round Python loop gets slow; LAPACK takes over.
JACOBI_MAX_DIM = 128


@dataclass(frozen=True)
class EigenDecomposition:
    """``a == vectors @ diag(values) @ vectors.T`` with ``values`` descending."""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def kron(a, b) -> np.ndarray:
    """Kronecker product; ``out[i*pb + p, j*qb + q] = a[i, j] * b[p, q]``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    (ra, ca), (rb, cb) = a.shape, b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(ra * rb, ca * cb)


def vec(m: np.ndarray) -> np.ndarray:
    """Column-major vectorization, so ``vec(u v^T) == kron(v, u)``."""
    return np.asarray(m).T.reshape(-1)


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v).reshape(cols, rows).T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: every (p, q) pair appears exactly once per sweep,
    # and the pairs inside one round are disjoint so they commute.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # First nonzero component of every eigenvector is made positive.
    scale = np.max(np.abs(vectors), axis=0, keepdims=True)
    significant = np.abs(vectors) > 1e-12 * np.where(scale > 0, scale, 1.0)
    first = np.argmax(significant, axis=0)
    signs = np.sign(vectors[first, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(
    a,
    tol: float = JACOBI_TOL,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
    method: str = "auto",
) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are scheduled in round-robin order so that each round applies
    ``n // 2`` disjoint rotations as one vectorized update. Iteration stops
    once the off-diagonal Frobenius norm drops below ``tol * ||a||_F``.

    ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up to
    ``JACOBI_MAX_DIM``). Ordering and sign conventions are identical.

    Raises:
        DimensionError: ``a`` is not square.
        ValueError: ``a`` is not symmetric within 1e-10.
        ConvergenceError: still not diagonal after ``max_sweeps`` sweeps.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise DimensionError(f"sym_eig needs a square matrix, got {a.shape}")
    asym = np.max(np.abs(a - a.T)) if n else 0.0
    if asym > SYMMETRY_TOL * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"matrix is not symmetric (max |a - a^T| = {asym:.3e})")

    if method not in ("auto", "jacobi", "lapack"):
        raise ValueError(f"unknown eigensolver {method!r}")
    work = 0.5 * (a + a.T)
    vectors = np.eye(n)
    norm = np.linalg.norm(work)
    if n <= 1 or norm == 0.0:
        return EigenDecomposition(np.diag(work).copy(), vectors)
    if method == "lapack" or (method == "auto" and n > JACOBI_MAX_DIM):
        values, vectors = np.linalg.eigh(work)
        order = np.argsort(-values, kind="stable")
        return EigenDecomposition(values[order], _fix_signs(vectors[:, order]))

    rounds = _round_robin(n)
    off = norm
    for sweep in range(max_sweeps + 1):
        off = np.linalg.norm(work - np.diag(np.diag(work)))
        if off < tol * norm:
            break
        if sweep == max_sweeps:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps", off / norm
            )
        for p, q in rounds:
            apq = work[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            with np.errstate(over="ignore"):
                # |theta| = inf for negligible apq gives t = 0, i.e. no rotation
                theta = (work[q, q] - work[p, p]) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            col_p, col_q = work[:, p], work[:, q]
            work[:, p] = c * col_p - s * col_q
            work[:, q] = s * col_p + c * col_q
            row_p, row_q = work[p, :], work[q, :]
            work[p, :] = c[:, None] * row_p - s[:, None] * row_q
            work[q, :] = s[:, None] * row_p + c[:, None] * row_q
            vec_p, vec_q = vectors[:, p], vectors[:, q]
            vectors[:, p] = c * vec_p - s * vec_q
            vectors[:, q] = s * vec_p + c * vec_q

    values = np.diag(work).copy()
    order = np.argsort(-values, kind="stable")
    return EigenDecomposition(values[order], _fix_signs(vectors[:, order]))


def solve_damped(eig: EigenDecomposition, damping: float, g) -> np.ndarray:
    """Return ``(A + damping*I)^{-1} g`` for ``A`` given by its eigendecomposition.

    ``g`` may be a vector or a matrix whose columns are right-hand sides.
    """
    if damping < 0:
        raise ValueError(f"damping must be >= 0, got {damping}")
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] != eig.dim:
        raise DimensionError(f"vector of length {g.shape[0]} vs operator dim {eig.dim}")
    shifted = eig.values + damping
    if np.any(shifted <= 0):
        worst = float(np.min(shifted))
        raise SingularMatrixError(
            f"damped operator is singular (min eigenvalue + damping = {worst:.3e})"
        )
    coords = eig.vectors.T @ g
    if g.ndim == 1:
        return eig.vectors @ (coords / shifted)
    return eig.vectors @ (coords / shifted[:, None])


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("spearman needs at least two observations")
    ra = rankdata(a) - (a.shape[0] + 1) / 2.0
    rb = rankdata(b) - (b.shape[0] + 1) / 2.0
    denom = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if denom == 0.0:
        raise ValueError("spearman undefined for constant input")
    return float(np.clip(np.dot(ra, rb) / denom, -1.0, 1.0))
