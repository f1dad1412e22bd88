"""Principal component analysis of surface datasets via SVD.

Surfaces are flattened row-major (k first, then T: flat index =
20*k_index + t_index) into an N x 820 matrix F, decomposed as
F = U Sigma V^T. The decomposition diagonalizes the smaller Gram matrix
with cyclic Jacobi rotations and recovers the other side by projection;
no mean-centering, so the leading mode is the overall level shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError
from .market_data import N_K, N_T, SurfaceDataset, VolSurface

FLAT_DIM = N_K * N_T  # 820


@dataclass
class SurfaceMatrix:
    """Flattened dataset: row i is surface i, column 20*ki + ti."""

    data: np.ndarray
    n_surfaces: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != FLAT_DIM:
            raise DomainError(f"surface matrix must be N x {FLAT_DIM}, "
                              f"got {self.data.shape}")
        if self.data.shape[0] != self.n_surfaces:
            raise DomainError("n_surfaces does not match the row count")


@dataclass
class SvdResult:
    singular_values: np.ndarray   # [R], nonincreasing, >= 0
    right_vectors: np.ndarray     # [820, R], orthonormal columns
    left_vectors: np.ndarray      # [N, R]


def flatten_surface(surface: VolSurface) -> np.ndarray:
    return surface.vols.reshape(-1).copy()


def unflatten_surface(row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (FLAT_DIM,):
        raise DomainError(f"expected a flat {FLAT_DIM}-vector, got {row.shape}")
    return row.reshape(N_K, N_T).copy()


def assemble_matrix(dataset: SurfaceDataset) -> SurfaceMatrix:
    if not dataset.surfaces:
        raise DomainError("empty dataset")
    data = np.vstack([flatten_surface(s) for s in dataset.surfaces])
    return SurfaceMatrix(data=data, n_surfaces=len(dataset.surfaces))


def _offdiag_norm2(a: np.ndarray) -> float:
    masked = a.copy()
    np.fill_diagonal(masked, 0.0)
    return float((masked ** 2).sum())


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12,
                max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps rotate every (p, q) pair whose off-diagonal entry is
    significant, until the off-diagonal Frobenius norm falls below
    tol * ||A||_F. Returns (eigenvalues, eigenvectors as columns),
    unsorted.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DomainError("jacobi_eigh needs a square matrix")
    v = np.eye(n)
    fro2 = float((a ** 2).sum())
    if fro2 == 0.0:
        return np.zeros(n), v
    for sweep in range(max_sweeps + 1):
        off2 = _offdiag_norm2(a)
        if off2 <= (tol ** 2) * fro2:
            return np.diag(a).copy(), v
        if sweep == max_sweeps:
            break
        # Early sweeps skip entries that barely contribute to the
        # off-diagonal mass (threshold strategy from the classic recipe).
        thresh2 = 0.2 * off2 / (n * n) if sweep < 3 else 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq * apq <= thresh2 or apq == 0.0:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                if abs(theta) > 1e150:  # theta^2 would overflow
                    t = 0.5 / theta
                else:
                    sign = 1.0 if theta >= 0 else -1.0
                    t = sign / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise ConvergenceError(f"Jacobi sweeps exhausted after {max_sweeps}")


def _mgs_columns(cols: np.ndarray, n_cols: int, drop_tol: float) -> np.ndarray:
    """Orthonormalize columns left to right by modified Gram-Schmidt,
    dropping columns whose residual falls below drop_tol, then pad with
    canonical basis directions until n_cols columns exist."""
    dim = cols.shape[0]
    kept: list[np.ndarray] = []
    for i in range(cols.shape[1]):
        if len(kept) == n_cols:
            break
        v = cols[:, i].copy()
        for u in kept:
            v -= (u @ v) * u
        norm = np.linalg.norm(v)
        if norm > drop_tol:
            kept.append(v / norm)
    for idx in range(dim):
        if len(kept) == n_cols:
            break
        v = np.zeros(dim)
        v[idx] = 1.0
        for u in kept:
            v -= (u @ v) * u
        norm = np.linalg.norm(v)
        if norm > 0.5:
            kept.append(v / norm)
    if len(kept) < n_cols:
        raise ConvergenceError("could not complete an orthonormal basis")
    return np.column_stack(kept)


def compute_svd(matrix: SurfaceMatrix, rank: int) -> SvdResult:
    """Truncated SVD F = U Sigma V^T with the top `rank` components.

    Diagonalizes the smaller Gram matrix (F F^T when N <= 820, else
    F^T F) with the Jacobi solver. An exactly-orthonormal right basis V
    is built first -- directly from the eigenvectors when the Gram side
    is F^T F, otherwise by Gram-Schmidt over the projected columns
    F^T U -- and then U Sigma is recomputed as F V, which makes the
    returned triple reconstruct F as the orthogonal projection F V V^T.
    Each right vector is signed so its largest-magnitude entry is
    positive.
    """
    return _svd_array(matrix.data, rank)


def _svd_array(f: np.ndarray, rank: int) -> SvdResult:
    n, d = f.shape
    max_rank = min(n, d)
    if not 1 <= rank <= max_rank:
        raise DomainError(f"rank must be in [1, {max_rank}], got {rank}")

    small_is_rows = n <= d
    gram = f @ f.T if small_is_rows else f.T @ f
    eigvals, eigvecs = jacobi_eigh(gram)
    order = np.argsort(eigvals)[::-1]
    scale = math.sqrt(max(float(eigvals[order[0]]), 0.0)) or 1.0
    if small_is_rows:
        projected = f.T @ eigvecs[:, order]
        right = _mgs_columns(projected, rank, drop_tol=1e-12 * scale)
    else:
        right = eigvecs[:, order[:rank]]

    mapped = f @ right                      # column i is sigma_i * u_i
    sing = np.linalg.norm(mapped, axis=0)
    resort = np.argsort(-sing, kind="stable")
    sing = sing[resort]
    right = right[:, resort]
    mapped = mapped[:, resort]

    left = np.zeros((n, rank))
    nonzero = sing > 1e-15 * scale
    left[:, nonzero] = mapped[:, nonzero] / sing[nonzero]
    if not nonzero.all():
        left = _mgs_columns(left[:, nonzero], rank, drop_tol=0.5)

    for i in range(rank):
        if right[np.argmax(np.abs(right[:, i])), i] < 0:
            right[:, i] = -right[:, i]
            left[:, i] = -left[:, i]
    return SvdResult(singular_values=sing, right_vectors=right, left_vectors=left)


def explained_spectrum(result: SvdResult) -> list[tuple[int, float, float]]:
    """(rank, singular value, cumulative energy) with energy normalized
    so the last entry is 1."""
    s2 = result.singular_values ** 2
    total = float(s2.sum())
    if total == 0.0:
        raise DomainError("all singular values are zero")
    cum = np.cumsum(s2) / total
    return [(i + 1, float(s), float(c))
            for i, (s, c) in enumerate(zip(result.singular_values, cum))]
