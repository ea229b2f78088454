"""Dense real linear algebra used by every analysis.

Matrices are plain float64 numpy arrays. Singular vectors carry no sign
convention, so cross-checkpoint comparisons go through principal angles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Final

import numpy as np

from .errors import NumericalError, ShapeMismatchError

RANK_CUTOFF: Final[float] = 1e-12


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD: ``u @ diag(sigma) @ vt`` reconstructs the input."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        """Number of singular triplets, min(rows, cols)."""
        return int(self.sigma.shape[0])


def as_matrix(data: object, name: str = "matrix") -> np.ndarray:
    """Convert to a C-contiguous float64 matrix and check it is finite.

    Raises:
        ShapeMismatchError: if the input is not two-dimensional.
        NumericalError: if any entry is NaN or infinite.
    """
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name}: matrix has non-finite entries")
    return m


def svd(m: np.ndarray, name: str = "matrix") -> SvdFactors:
    """Thin singular value decomposition.

    Args:
        m: finite matrix with at least one row and column.
        name: label used in error messages.

    Returns:
        Factors with r = min(rows, cols), sigma non-increasing.

    Raises:
        NumericalError: if LAPACK does not converge.
    """
    m = as_matrix(m, name)
    if min(m.shape) < 1:
        raise ShapeMismatchError(f"{name}: empty matrix {m.shape}")
    try:
        u, sigma, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for '{name}'") from exc
    return SvdFactors(u=u, sigma=sigma, vt=vt)


def frobenius_norm(m: np.ndarray) -> float:
    """sqrt of the sum of squared entries."""
    return float(np.linalg.norm(m, ord="fro"))


def spectral_norm(m: np.ndarray) -> float:
    """Largest singular value."""
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, ord=2))


def numerical_rank(sigma: np.ndarray, cutoff: float = RANK_CUTOFF) -> int:
    """Count of singular values above ``cutoff * sigma[0]``."""
    if sigma.size == 0 or sigma[0] <= 0:
        return 0
    return int(np.sum(sigma > cutoff * sigma[0]))


def truncate_rank_range(f: SvdFactors, lo: int, hi: int) -> np.ndarray:
    """Sum of the singular triplets with index in [lo, hi).

    Raises:
        ValueError: if the range is empty or out of bounds.
    """
    if not 0 <= lo < hi <= f.rank:
        raise ValueError(f"rank range [{lo}, {hi}) invalid for rank {f.rank}")
    return (f.u[:, lo:hi] * f.sigma[lo:hi]) @ f.vt[lo:hi, :]


def principal_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosines of the principal angles between span(a) and span(b).

    Both arguments must have orthonormal columns and identical shapes.
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"subspace bases differ in shape: {a.shape} vs {b.shape}")
    cosines = np.linalg.svd(a.T @ b, compute_uv=False)
    return np.clip(cosines, 0.0, 1.0)


def subspace_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Mean principal-angle cosine between two orthonormal column blocks, in [0, 1]."""
    return float(np.mean(principal_cosines(a, b)))


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the column space via QR."""
    q, _ = np.linalg.qr(m)
    return q


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal n x n matrix."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine of the angle between two flattened arrays, 0 if either is zero."""
    x = np.ravel(x)
    y = np.ravel(y)
    denominator = np.linalg.norm(x) * np.linalg.norm(y)
    if denominator == 0:
        return 0.0
    return float(x @ y / denominator)
