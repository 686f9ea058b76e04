"""Matern covariance kernel, its derivatives, and GP-derivative conditioning.

The kernel is the Matern family

    k(l) = phi1 * 2^(1-nu)/Gamma(nu) * (sqrt(2 nu) l / phi2)^nu
           * B_nu(sqrt(2 nu) l / phi2),      l = |s - t|,

where ``B_nu`` is the modified Bessel function of the second kind.  With
``nu > 2`` the kernel is twice differentiable, so the derivative process of
the GP exists and its conditional law given the values on a grid is Gaussian
with mean ``m (x - mu)`` and covariance ``K``:

    C = k(I, I)
    m = k'_s(I, I) C^{-1}
    K = k''_{st}(I, I) - k'_s(I, I) C^{-1} k'_t(I, I)

All inverses are computed once with a symmetric (Cholesky) factorization,
escalating a diagonal jitter when needed; the jitter actually applied is
recorded on the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .errors import IllConditionedKernelError

__all__ = [
    "KernelParams",
    "DiscretizationGrid",
    "GpConditioned",
    "matern_eval",
    "matern_derivatives",
    "matern_gram",
    "build_conditioning",
    "gp_marginal_loglik",
]

JITTER_START_FRAC = 1e-10
JITTER_GROWTH = 10.0
JITTER_MAX_FRAC = 1e-4


@dataclass(frozen=True)
class KernelParams:
    """Matern hyperparameters: variance scale, bandwidth, smoothness."""

    phi1: float
    phi2: float
    nu: float = 2.01

    def __post_init__(self):
        if not (np.isfinite(self.phi1) and self.phi1 > 0):
            raise ValueError(f"phi1 must be a positive finite number, got {self.phi1}")
        if not (np.isfinite(self.phi2) and self.phi2 > 0):
            raise ValueError(f"phi2 must be a positive finite number, got {self.phi2}")
        if not (np.isfinite(self.nu) and self.nu > 2):
            raise ValueError(f"nu must exceed 2 for twice-differentiability, got {self.nu}")


@dataclass(frozen=True)
class DiscretizationGrid:
    """Strictly increasing time grid on which the ODE constraint is enforced."""

    times: np.ndarray
    horizon: float | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("grid needs at least 2 time points")
        if not np.all(np.isfinite(times)):
            raise ValueError("grid times must be finite")
        if np.any(np.diff(times) <= 0):
            raise ValueError("grid times must be strictly increasing")
        if self.horizon is None:
            object.__setattr__(self, "horizon", float(times[-1]))
        elif self.horizon < times[-1]:
            raise ValueError("horizon lies before the last grid point")

    def __len__(self):
        return self.times.size


def _matern_terms(phi: KernelParams, lag):
    """Scaled distance ``u`` and the leading constant of the Matern kernel."""
    a = np.sqrt(2.0 * phi.nu) / phi.phi2
    const = phi.phi1 * 2.0 ** (1.0 - phi.nu) / gamma_fn(phi.nu)
    return a, const, a * np.abs(lag)


def matern_eval(phi: KernelParams, s, t):
    """Evaluate the Matern kernel at times ``s`` and ``t`` (broadcasting)."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise ValueError("kernel inputs must be finite")
    _, const, u = _matern_terms(phi, s - t)
    with np.errstate(invalid="ignore"):
        value = const * u**phi.nu * kv(phi.nu, u)
    # l = 0 limit is exactly phi1
    value = np.where(u == 0.0, phi.phi1, value)
    return value if value.ndim else float(value)


def matern_derivatives(phi: KernelParams, s, t):
    """Partial derivatives (d/ds, d/dt, d2/ds dt) of the Matern kernel.

    Uses the identity d/du [u^nu B_nu(u)] = -u^nu B_{nu-1}(u), which gives
    closed forms for all three derivatives; the diagonal (s = t) limits are
    0, 0, and phi1 * nu / ((nu - 1) * phi2^2).
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise ValueError("kernel inputs must be finite")
    a, const, u = _matern_terms(phi, s - t)
    nu = phi.nu
    with np.errstate(invalid="ignore"):
        # dk/dl, defined for l > 0
        dk_dl = -const * a * u**nu * kv(nu - 1.0, u)
        sign = np.sign(s - t)
        dk_ds = np.where(u == 0.0, 0.0, sign * dk_dl)
        # d2k/dsdt = -(d2k/dl2) off the diagonal; continuous at l = 0
        d2_off = const * a**2 * (u ** (nu - 1.0) * kv(nu - 1.0, u) - u**nu * kv(nu - 2.0, u))
    d2_diag = phi.phi1 * nu / ((nu - 1.0) * phi.phi2**2)
    d2k = np.where(u == 0.0, d2_diag, d2_off)
    if dk_ds.ndim:
        return dk_ds, -dk_ds, d2k
    return float(dk_ds), float(-dk_ds), float(d2k)


def _unique_lags(times):
    """Unique absolute lags of a time grid and the index map back to n x n.

    Evenly spaced grids have only n distinct lags, so evaluating the kernel
    (and its Bessel functions) on the unique lags instead of all n^2 pairs
    cuts the Gram construction cost by roughly a factor of n.
    """
    lag = times[:, None] - times[None, :]
    uniq, inverse = np.unique(np.abs(lag), return_inverse=True)
    return lag, uniq, inverse.reshape(lag.shape)


def matern_gram(phi: KernelParams, times):
    """Gram matrix ``k(times, times)``."""
    times = np.asarray(times, dtype=float)
    _, uniq, inverse = _unique_lags(times)
    return matern_eval(phi, uniq, 0.0)[inverse]


@dataclass(frozen=True)
class GpConditioned:
    """Precomputed conditioning matrices for one system component.

    ``C_inv`` is the precision of the GP values on the grid, ``m`` projects
    values onto the conditional mean of the derivative process, and ``K_inv``
    is the precision of the derivatives given the values.  Log-determinants
    of the (jittered) C and K are kept for the constant terms of the
    posterior density.
    """

    C_inv: np.ndarray
    m: np.ndarray
    K_inv: np.ndarray
    logdet_C: float
    logdet_K: float
    jitter: float
    phi: KernelParams
    mu: float = 0.0
    C: np.ndarray | None = field(default=None, repr=False)
    K: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.C_inv.shape[0]
        for name in ("C_inv", "m", "K_inv"):
            mat = getattr(self, name)
            if mat.shape != (n, n) or not np.all(np.isfinite(mat)):
                raise ValueError(f"{name} must be a finite {n}x{n} matrix")
        for name in ("C_inv", "K_inv"):
            mat = getattr(self, name)
            scale = max(np.abs(mat).max(), 1.0)
            if np.abs(mat - mat.T).max() > 1e-10 * scale:
                raise ValueError(f"{name} is not symmetric within tolerance")

    @property
    def n(self):
        return self.C_inv.shape[0]


def _chol_inverse(mat, phi1, label="matrix"):
    """Invert a symmetric PSD matrix by Cholesky with escalating jitter.

    Returns (inverse, logdet_of_jittered_matrix, jitter_used).
    """
    n = mat.shape[0]
    eye = np.eye(n)
    jitter = JITTER_START_FRAC * phi1
    max_jitter = JITTER_MAX_FRAC * phi1
    sym = 0.5 * (mat + mat.T)
    while True:
        try:
            factor = cho_factor(sym + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            factor = None
        if factor is not None:
            inv = cho_solve(factor, eye)
            logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
            return 0.5 * (inv + inv.T), logdet, jitter
        if jitter >= max_jitter:
            raise IllConditionedKernelError(
                f"Cholesky of {label} failed at maximum jitter {max_jitter:.3e}"
            )
        jitter = min(jitter * JITTER_GROWTH, max_jitter)


def build_conditioning(
    phi: KernelParams, grid: DiscretizationGrid, mu: float = 0.0, keep_dense: bool = False
) -> GpConditioned:
    """Build (C^-1, m, K^-1) for one component on the given grid."""
    times = grid.times
    lag, uniq, inverse = _unique_lags(times)
    C = matern_eval(phi, uniq, 0.0)[inverse]
    dk_dl, _, d2k_u = matern_derivatives(phi, uniq, 0.0)
    dk_ds = np.sign(lag) * dk_dl[inverse]
    d2k = d2k_u[inverse]
    C_inv, logdet_C, jitter_c = _chol_inverse(C, phi.phi1, label="C")
    m = dk_ds @ C_inv
    # k'_t(I, I) is the transpose of k'_s(I, I) for a stationary kernel
    K = d2k - dk_ds @ C_inv @ dk_ds.T
    K_inv, logdet_K, jitter_k = _chol_inverse(K, phi.phi1, label="K")
    return GpConditioned(
        C_inv=C_inv,
        m=m,
        K_inv=K_inv,
        logdet_C=logdet_C,
        logdet_K=logdet_K,
        jitter=max(jitter_c, jitter_k),
        phi=phi,
        mu=mu,
        C=C if keep_dense else None,
        K=K if keep_dense else None,
    )


def gp_marginal_loglik(phi: KernelParams, sigma: float, y, times):
    """Log-density of centered observations under N(0, k + sigma^2 I)."""
    y = np.asarray(y, dtype=float)
    times = np.asarray(times, dtype=float)
    if y.size != times.size:
        raise ValueError("y and times must have equal length")
    cov = matern_gram(phi, times) + sigma**2 * np.eye(y.size)
    jitter = JITTER_START_FRAC * phi.phi1
    max_jitter = JITTER_MAX_FRAC * phi.phi1
    while True:
        try:
            factor = cho_factor(cov + jitter * np.eye(y.size), lower=True)
            break
        except np.linalg.LinAlgError:
            if jitter >= max_jitter:
                raise IllConditionedKernelError(
                    "marginal covariance not positive-definite at maximum jitter"
                )
            jitter = min(jitter * JITTER_GROWTH, max_jitter)
    alpha = cho_solve(factor, y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return -0.5 * (y.size * np.log(2.0 * np.pi) + logdet + float(y @ alpha))
