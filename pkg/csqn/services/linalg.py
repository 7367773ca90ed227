"""Dense kernels for tall-skinny N x c factors and small c x c systems.

Everything runs in float64. Results are deterministic for identical inputs:
LAPACK is called with fixed arguments and every decomposition is followed by a
sign normalisation so that eigenvectors and QR factors are unique.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from csqn.errors import ShapeError

SYMMETRY_RTOL = 1e-8


@dataclass(frozen=True)
class SymEig:
    """Eigen-decomposition of a symmetric matrix, eigenvalues ascending."""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def as_dense(a, name: str = "matrix") -> np.ndarray:
    """Validate and promote an operand to a finite float64 2-D array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} has non-finite entries")
    return arr


def _check_symmetric(a: np.ndarray, name: str) -> None:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got {a.shape}")
    scale = max(np.linalg.norm(a), 1.0)
    if np.linalg.norm(a - a.T) > SYMMETRY_RTOL * scale:
        raise ShapeError(f"{name} is not symmetric within {SYMMETRY_RTOL:g}")


def matmul(a, b) -> np.ndarray:
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def cholesky(a) -> Optional[np.ndarray]:
    """Lower Cholesky factor, or None when `a` is not positive definite."""
    a = as_dense(a)
    _check_symmetric(a, "cholesky input")
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        return scipy.linalg.cholesky(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None


def _fix_column_signs(v: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every column made positive
    if v.size == 0:
        return v
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def sym_eig(a) -> SymEig:
    a = as_dense(a)
    _check_symmetric(a, "sym_eig input")
    sym = 0.5 * (a + a.T)
    w, v = scipy.linalg.eigh(sym, check_finite=False)
    return SymEig(eigenvalues=w, eigenvectors=_fix_column_signs(v))


def qr(a) -> Tuple[np.ndarray, np.ndarray]:
    """Thin QR with a nonnegative diagonal on R."""
    a = as_dense(a)
    rows, cols = a.shape
    if rows < cols:
        raise ShapeError(f"qr needs rows >= cols, got {a.shape}")
    q, r = scipy.linalg.qr(a, mode="economic", check_finite=False)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs, r * signs[:, None]


def gram_thin_svd(z, keep: int) -> np.ndarray:
    """Project Z onto its top-`keep` right-singular subspace via eig(ZᵀZ).

    Returns Z·V_keep, whose outer product is the best rank-`keep` Frobenius
    approximation of ZZᵀ.
    """
    z = as_dense(z, "z")
    if keep <= 0:
        raise ShapeError(f"keep must be positive, got {keep}")
    if keep > z.shape[1]:
        raise ShapeError(f"keep={keep} exceeds the {z.shape[1]} available columns")
    eig = sym_eig(matmul(z.T, z))
    # descending, ties in eigenvector index order
    order = np.argsort(-eig.eigenvalues, kind="stable")[:keep]
    return matmul(z, eig.eigenvectors[:, order])
