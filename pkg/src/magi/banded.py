"""Band-matrix approximation of the precision/projection matrices.

The precision matrices of a short-memory GP decay quickly away from the
diagonal, so quadratic forms can be evaluated on a banded copy at O(n * b)
cost instead of O(n^2).  If a banded quadratic form diverges from the dense
value the caller should be warned to increase the band size; see
:func:`check_band_quadratic`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BandedMatrix",
    "band_restrict",
    "band_mask",
    "check_band_quadratic",
    "BandDivergenceWarning",
]


class BandDivergenceWarning(UserWarning):
    """Banded quadratic form diverged from its dense counterpart."""


@dataclass(frozen=True)
class BandedMatrix:
    """Square matrix stored as diagonals within a fixed bandwidth.

    ``diagonals[bandwidth + i - j, j]`` holds entry (i, j) for
    ``|i - j| <= bandwidth``; entries outside the band are exactly zero.
    """

    bandwidth: int
    diagonals: np.ndarray
    dimension: int

    def __post_init__(self):
        if self.bandwidth < 0:
            raise ValueError("bandwidth must be nonnegative")
        if self.bandwidth >= self.dimension:
            raise ValueError("bandwidth must be smaller than the dimension")
        if self.diagonals.shape != (2 * self.bandwidth + 1, self.dimension):
            raise ValueError("diagonal storage has the wrong shape")

    def matvec(self, v):
        """Matrix-vector product in O(n * bandwidth)."""
        v = np.asarray(v, dtype=float)
        n, b = self.dimension, self.bandwidth
        out = self.diagonals[b] * v
        for k in range(1, b + 1):
            # k-th subdiagonal: A[i, i-k]; k-th superdiagonal: A[i, i+k]
            out[k:] += self.diagonals[b + k, : n - k] * v[: n - k]
            out[: n - k] += self.diagonals[b - k, k:] * v[k:]
        return out

    def quad_form(self, v):
        """v' A v using only the stored band."""
        v = np.asarray(v, dtype=float)
        return float(v @ self.matvec(v))

    def to_dense(self):
        n, b = self.dimension, self.bandwidth
        out = np.zeros((n, n))
        for k in range(-b, b + 1):
            idx = np.arange(max(0, k), min(n, n + k))
            out[idx, idx - k] = self.diagonals[b + k, idx - k]
        return out


def band_restrict(matrix, bandwidth: int) -> BandedMatrix:
    """Zero all entries with |row - col| > bandwidth, storing only the band."""
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise ValueError("matrix must be square")
    bandwidth = int(bandwidth)
    if bandwidth < 0:
        raise ValueError("bandwidth must be nonnegative")
    bandwidth = min(bandwidth, n - 1)
    diagonals = np.zeros((2 * bandwidth + 1, n))
    for k in range(-bandwidth, bandwidth + 1):
        idx = np.arange(max(0, k), min(n, n + k))
        diagonals[bandwidth + k, idx - k] = matrix[idx, idx - k]
    return BandedMatrix(bandwidth=bandwidth, diagonals=diagonals, dimension=n)


def band_mask(matrix, bandwidth: int | None):
    """Dense copy of ``matrix`` with entries outside the band zeroed.

    The sampler hot path uses these masked dense matrices (BLAS-backed
    products); :class:`BandedMatrix` provides the O(n * b) form.
    """
    matrix = np.asarray(matrix, dtype=float)
    if bandwidth is None:
        return matrix.copy()
    n = matrix.shape[0]
    rows = np.arange(n)
    mask = np.abs(rows[:, None] - rows[None, :]) <= int(bandwidth)
    return np.where(mask, matrix, 0.0)


def check_band_quadratic(dense, banded: BandedMatrix, v, rel_tol: float = 0.10) -> bool:
    """Compare a banded quadratic form against the dense value.

    Emits :class:`BandDivergenceWarning` (advising a larger band size) when
    the banded value exceeds the dense one by more than ``rel_tol`` relative.
    Returns True when the check passes.
    """
    v = np.asarray(v, dtype=float)
    dense_val = float(v @ (np.asarray(dense) @ v))
    band_val = banded.quad_form(v)
    scale = max(abs(dense_val), 1e-300)
    if band_val - dense_val > rel_tol * scale:
        warnings.warn(
            "banded quadratic form diverged from the dense value; "
            "increase the band size",
            BandDivergenceWarning,
            stacklevel=2,
        )
        return False
    return True
