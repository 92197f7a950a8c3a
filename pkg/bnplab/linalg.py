"""
Small dense linear algebra used by the analysis paths.
Matrices are float64 numpy arrays in row-major (C) order.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from bnplab.errors import NonFiniteError, RankError, ShapeError

MAX_SVD_DIM = 5000


def as_matrix(a) -> np.ndarray:
    """Return `a` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got an array with shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix has non-finite entries")
    return m


def default_rank_tol(shape: Tuple[int, ...]) -> float:
    return max(shape) * 1e-12


@dataclass(frozen=True)
class SvdResult:
    """Singular values sorted descending, plus the relative rank tolerance."""
    singular_values: np.ndarray
    rank_tolerance: float

    @property
    def sigma_max(self) -> float:
        return float(self.singular_values[0]) if self.singular_values.size else 0.0

    @property
    def nonzero(self) -> np.ndarray:
        """Singular values above rank_tolerance * sigma_max."""
        return self.singular_values[self.singular_values > self.rank_tolerance * self.sigma_max]

    @property
    def sigma_star_min(self) -> float:
        nz = self.nonzero
        return float(nz[-1]) if nz.size else 0.0

    @property
    def rank(self) -> int:
        return int(self.nonzero.size) if self.sigma_max > 0 else 0


def svd(a, rank_tol: Optional[float] = None) -> SvdResult:
    m = as_matrix(a)
    if max(m.shape) > MAX_SVD_DIM:
        raise ShapeError(f"matrix {m.shape} exceeds the desk-scale limit {MAX_SVD_DIM}")
    if rank_tol is None:
        rank_tol = default_rank_tol(m.shape)
    sv = np.linalg.svd(m, compute_uv=False)
    return SvdResult(singular_values=np.sort(sv)[::-1], rank_tolerance=float(rank_tol))


def condition_number(a, rank_tol: Optional[float] = None) -> float:
    """
    sigma_max / sigma*_min, where sigma*_min is the smallest singular value
    above rank_tol * sigma_max. Reduces to ||A|| ||A^-1|| for invertible A.
    """
    result = svd(a, rank_tol)
    if result.sigma_max == 0.0:
        raise RankError("condition number of an all-zero matrix is undefined")
    return result.sigma_max / result.sigma_star_min


def spd_condition_number(a, rank_tol: Optional[float] = None) -> Tuple[float, float, float]:
    """
    lambda_max / lambda*_min of a symmetric positive semi-definite matrix.
    Returns (kappa, lambda_max, lambda_star_min).
    """
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got {m.shape}")
    if rank_tol is None:
        rank_tol = default_rank_tol(m.shape)
    lam = np.linalg.eigvalsh(0.5 * (m + m.T))
    lam_max = float(lam[-1])
    if lam_max <= 0.0:
        raise RankError("matrix has no positive eigenvalue")
    positive = lam[lam > rank_tol * lam_max]
    lam_min = float(positive[0])
    return lam_max / lam_min, lam_max, lam_min


def column_stats(a) -> Tuple[np.ndarray, np.ndarray]:
    """Per-column mean and biased (divisor N) variance."""
    m = as_matrix(a)
    if m.shape[0] < 1:
        raise ShapeError("column_stats needs at least one row")
    mean = m.mean(axis=0)
    var = ((m - mean) ** 2).mean(axis=0)
    return mean, var


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(root_seed: int, count: int) -> List[int]:
    """Independent per-trial seeds derived deterministically from a root seed."""
    children = np.random.SeedSequence(root_seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]
