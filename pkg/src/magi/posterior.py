"""Tempered log-posterior over trajectories, parameters, and noise levels.

The target density combines, per component d:

  * GP prior:            ||x_d - mu_d||^2_{C_d^-1}  (+ log-det and 2*pi terms)
  * constraint:          ||f_d(x, theta) - m_d (x_d - mu_d)||^2_{K_d^-1}
  * observation model:   ||x_d(tau_d) - y_d||^2 / sigma_d^2 + N_d log(2 pi sigma_d^2)

with the prior and constraint blocks (including their constant terms)
divided by the tempering exponent beta, so beta = 1 recovers the
untempered posterior exactly.  The parameter prior is flat on the declared
support; outside the support the density is -inf (rejection semantics).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .banded import band_mask
from .errors import ConfigError, DomainError
from .kernels import DiscretizationGrid, GpConditioned
from .observations import ObservationSet
from .systems import OdeSystem

__all__ = [
    "PosteriorState",
    "TemperingConfig",
    "LogPosterior",
    "FlatTarget",
    "log_posterior",
    "log_posterior_gradient",
    "compute_w_i",
    "compute_w_i_from_derivative",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PosteriorState:
    """A point in the sampled space: trajectory values, theta, noise sds."""

    x: np.ndarray        # (D, n) trajectory values on the grid
    theta: np.ndarray    # (P,)
    sigma: np.ndarray    # (D,) noise sd per component (entries for unobserved ignored)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)

    def copy(self) -> "PosteriorState":
        return PosteriorState(self.x.copy(), self.theta.copy(), self.sigma.copy())


@dataclass(frozen=True)
class TemperingConfig:
    """Prior tempering exponent; the recommended default is D|I|/N."""

    beta: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be positive, got {self.beta}")


def _grid_indices(grid_times, obs_times, name):
    """Indices of obs_times inside grid_times; error if any is missing."""
    idx = np.searchsorted(grid_times, obs_times)
    idx = np.clip(idx, 0, grid_times.size - 1)
    # searchsorted may land one slot right of the matching point
    left = np.clip(idx - 1, 0, grid_times.size - 1)
    idx = np.where(
        np.abs(grid_times[left] - obs_times) < np.abs(grid_times[idx] - obs_times),
        left,
        idx,
    )
    tol = 1e-8 * max(1.0, float(np.abs(grid_times).max()))
    if obs_times.size and np.abs(grid_times[idx] - obs_times).max() > tol:
        raise ConfigError(
            f"component {name}: observation times are not all on the grid"
        )
    return idx


class LogPosterior:
    """Evaluates the tempered posterior and its analytic gradient.

    Construction precomputes grid alignment and stacks the per-component
    conditioning matrices (optionally band-restricted) so that repeated
    evaluation during sampling is a handful of BLAS calls.
    """

    def __init__(
        self,
        system: OdeSystem,
        grid: DiscretizationGrid,
        gp_models,
        observations: ObservationSet,
        tempering: TemperingConfig | None = None,
        band_size: int | None = None,
    ):
        if len(gp_models) != system.dim:
            raise ConfigError("one GP model per system component is required")
        if observations.dim != system.dim:
            raise ConfigError("observation set does not match the system dimension")
        self.system = system
        self.grid = grid
        self.gp_models = tuple(gp_models)
        self.observations = observations
        self.beta = float(tempering.beta) if tempering is not None else 1.0
        self.band_size = band_size

        n = len(grid)
        D = system.dim
        self.n = n
        self.times = grid.times
        self.mu = np.array([g.mu for g in gp_models])[:, None]  # (D, 1)

        self.C_inv = np.stack([band_mask(g.C_inv, band_size) for g in gp_models])
        self.m = np.stack([band_mask(g.m, band_size) for g in gp_models])
        self.m_T = np.ascontiguousarray(self.m.transpose(0, 2, 1))
        self.K_inv = np.stack([band_mask(g.K_inv, band_size) for g in gp_models])
        self.const = np.array(
            [2.0 * n * LOG_2PI + g.logdet_C + g.logdet_K for g in gp_models]
        )

        self.obs_idx = [
            _grid_indices(grid.times, t, name)
            for t, name in zip(observations.times, observations.component_names)
        ]
        self.obs_values = observations.values
        self.obs_counts = observations.counts
        self.observed = observations.observed

        lo, hi = zip(*system.bounds)
        self.theta_lower = np.array(lo, dtype=float)
        self.theta_upper = np.array(hi, dtype=float)

        # hot-path scratch space and plain-python support bounds
        self._mu3 = self.mu[:, :, None]                      # (D, 1, 1)
        self._xc3 = np.empty((D, n, 1))
        self._r3 = np.empty((D, n, 1))
        self._Cx3 = np.empty((D, n, 1))
        self._Kr3 = np.empty((D, n, 1))
        self._mKr3 = np.empty((D, n, 1))
        self.const_sum = float(self.const.sum())
        self._lo_list = self.theta_lower.tolist()
        self._hi_list = self.theta_upper.tolist()
        self._obs_packed = [
            (d, self.obs_idx[d], self.obs_values[d], int(self.obs_counts[d]))
            for d in range(D)
            if self.observed[d]
        ]

    # -- helpers -----------------------------------------------------------

    def theta_in_support(self, theta) -> bool:
        for v, lo, hi in zip(theta.tolist(), self._lo_list, self._hi_list):
            if not (lo <= v <= hi):          # also rejects NaN
                return False
        return True

    def _gauss_terms(self, state: PosteriorState):
        """Fill the scratch buffers; returns (D, n) views into them."""
        xc3, r3 = self._xc3, self._r3
        with np.errstate(over="ignore", invalid="ignore"):
            np.subtract(state.x[:, :, None], self._mu3, out=xc3)
            fx = self.system.f(state.x, state.theta, self.times)
            np.matmul(self.m, xc3, out=r3)
            np.subtract(fx[:, :, None], r3, out=r3)
            np.matmul(self.C_inv, xc3, out=self._Cx3)
            np.matmul(self.K_inv, r3, out=self._Kr3)
        return xc3[:, :, 0], r3[:, :, 0], self._Cx3[:, :, 0], self._Kr3[:, :, 0]

    # -- evaluation --------------------------------------------------------

    def value(self, state: PosteriorState) -> float:
        if not self.theta_in_support(state.theta):
            return -np.inf
        try:
            xc, r, Cx, Kr = self._gauss_terms(state)
        except DomainError:
            return -np.inf
        total = (
            np.einsum("di,di->", xc, Cx)
            + np.einsum("di,di->", r, Kr)
            + self.const_sum
        )
        obs = 0.0
        for d, idx, y, count in self._obs_packed:
            sigma = state.sigma[d]
            if not (np.isfinite(sigma) and sigma > 0):
                return -np.inf
            e = state.x[d, idx] - y
            obs += count * np.log(2.0 * np.pi * sigma**2)
            obs += float(e @ e) / sigma**2
        value = -0.5 * (obs + total / self.beta)
        return float(value) if np.isfinite(value) else -np.inf

    def value_and_grad(self, state: PosteriorState):
        """Posterior value and gradients w.r.t. (x, theta, sigma).

        The sigma gradient is in the natural parameterization; entries for
        unobserved or known-sigma components are zero-filled by the caller's
        convention (here: computed for every observed component).
        """
        if not self.theta_in_support(state.theta):
            raise ValueError("gradient requested outside the parameter support")
        x, theta = state.x, state.theta
        xc, r, Cx, Kr = self._gauss_terms(state)
        jac_x = self.system.jac_x(x, theta, self.times)
        jac_theta = self.system.jac_theta(x, theta, self.times)

        total = (
            np.einsum("di,di->", xc, Cx)
            + np.einsum("di,di->", r, Kr)
            + self.const_sum
        )
        np.matmul(self.m_T, self._Kr3, out=self._mKr3)
        grad_x = Cx - self._mKr3[:, :, 0]
        grad_x += np.einsum("kdi,ki->di", jac_x, Kr)
        inv_beta = -1.0 / self.beta
        grad_x *= inv_beta
        grad_theta = np.einsum("kpi,ki->p", jac_theta, Kr)
        grad_theta *= inv_beta
        grad_sigma = np.zeros(self.system.dim)

        obs = 0.0
        sig = state.sigma
        for d, idx, y, count in self._obs_packed:
            sigma = sig[d]
            s2 = sigma * sigma
            e = x[d, idx] - y
            sq = float(e @ e)
            obs += count * np.log(2.0 * np.pi * s2) + sq / s2
            grad_x[d, idx] -= e / s2         # observation indices are unique
            grad_sigma[d] = -count / sigma + sq / (s2 * sigma)

        value = -0.5 * (obs + total / self.beta)
        return float(value), grad_x, grad_theta, grad_sigma


class FlatTarget:
    """Flattened view of the posterior for samplers and optimizers.

    Position layout: [x (D*n), theta (P), log sigma (one per observed
    component with unknown noise)].  Noise sds are sampled on the log scale
    with the change-of-variables Jacobian added, keeping positivity without
    constraints; parameter bounds are exposed for leapfrog reflection.
    """

    def __init__(self, posterior: LogPosterior, sigma_fixed: np.ndarray):
        self.posterior = posterior
        D, n = posterior.system.dim, posterior.n
        self.D, self.n, self.P = D, n, len(posterior.theta_lower)
        self.sigma_fixed = np.asarray(sigma_fixed, dtype=float)
        self.free_sigma = np.array(
            [
                posterior.observed[d] and not np.isfinite(self.sigma_fixed[d])
                for d in range(D)
            ]
        )
        self.n_sigma = int(self.free_sigma.sum())
        self.size = D * n + self.P + self.n_sigma
        lower = np.full(self.size, -np.inf)
        upper = np.full(self.size, np.inf)
        lower[D * n : D * n + self.P] = posterior.theta_lower
        upper[D * n : D * n + self.P] = posterior.theta_upper
        self.lower, self.upper = lower, upper

    def pack(self, state: PosteriorState) -> np.ndarray:
        parts = [state.x.ravel(), state.theta]
        if self.n_sigma:
            parts.append(np.log(state.sigma[self.free_sigma]))
        return np.concatenate(parts)

    def unpack(self, q: np.ndarray) -> PosteriorState:
        D, n, P = self.D, self.n, self.P
        x = q[: D * n].reshape(D, n)
        theta = q[D * n : D * n + P]
        sigma = np.where(np.isfinite(self.sigma_fixed), self.sigma_fixed, 1.0)
        if self.n_sigma:
            sigma = sigma.copy()
            sigma[self.free_sigma] = np.exp(q[D * n + P :])
        return PosteriorState(x, theta, sigma)

    def log_prob(self, q: np.ndarray) -> float:
        state = self.unpack(q)
        value = self.posterior.value(state)
        if self.n_sigma and np.isfinite(value):
            value += float(np.sum(q[self.D * self.n + self.P :]))  # log-sigma Jacobian
        return value

    def log_prob_and_grad(self, q: np.ndarray):
        state = self.unpack(q)
        value, gx, gt, gs = self.posterior.value_and_grad(state)
        Dn = self.D * self.n
        grad = np.empty(self.size)
        grad[:Dn] = gx.ravel()
        grad[Dn : Dn + self.P] = gt
        if self.n_sigma:
            sig = state.sigma[self.free_sigma]
            # chain rule to log sigma, plus the Jacobian term
            grad[Dn + self.P :] = gs[self.free_sigma] * sig + 1.0
            value += float(np.sum(np.log(sig)))
        return value, grad


# -- functional wrappers (one-shot evaluation) ------------------------------

def log_posterior(state, observations, gp_models, system, tempering=None, grid=None):
    """One-shot tempered log-posterior evaluation."""
    lp = LogPosterior(system, grid, gp_models, observations, tempering)
    return lp.value(state)


def log_posterior_gradient(state, observations, gp_models, system, tempering=None, grid=None):
    """One-shot gradient over (x, theta, sigma of observed components)."""
    lp = LogPosterior(system, grid, gp_models, observations, tempering)
    return lp.value_and_grad(state)[1:]


def compute_w_i_from_derivative(x, xdot, theta, times, system: OdeSystem) -> float:
    """Max absolute constraint violation given explicit derivative values."""
    fx = system.f(np.asarray(x, dtype=float), np.asarray(theta, dtype=float), times)
    return float(np.abs(np.asarray(xdot) - fx).max())


def compute_w_i(x, theta, grid: DiscretizationGrid, gp_models, system: OdeSystem) -> float:
    """Diagnostic: max |GP derivative mean - f| over the grid and components.

    The derivative estimate for component d is m_d (x_d - mu_d); the
    diagnostic is reported, never used inside sampling.
    """
    x = np.asarray(x, dtype=float)
    xdot = np.stack(
        [g.m @ (x[d] - g.mu) for d, g in enumerate(gp_models)]
    )
    return compute_w_i_from_derivative(x, xdot, theta, grid.times, system)
