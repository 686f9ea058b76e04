"""Inference driver: hyperparameter fitting, initialization, sampling, summary.

The full run proceeds in stages:

  (a) per observed component, fit the Matern hyperparameters (and the noise
      sd when unknown) on the smallest evenly spaced superset of its
      observation times, with a Fourier-derived Gaussian prior on the
      bandwidth;
  (b) initialize the trajectory by linear interpolation of the observations
      onto the discretization grid;
  (c) initialize theta by maximizing the posterior over theta alone, or --
      when some component is unobserved -- jointly optimize theta, the
      unobserved component's hyperparameters, and its whole curve;
  (d) temper the prior with beta = D|I|/N unless overridden;
  (e) run HMC;
  (f) summarize the chain into posterior means and percentile bands.

Hyperparameters are fitted once and held fixed throughout sampling.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .banded import band_restrict, check_band_quadratic
from .errors import ConfigError, DegenerateSpectrumError, InitializationError
from .hmc import SamplerConfig, run_chain, summarize_chain
from .kernels import (
    DiscretizationGrid,
    GpConditioned,
    KernelParams,
    build_conditioning,
    gp_marginal_loglik,
    matern_gram,
)
from .observations import ObservationSet
from .posterior import (
    FlatTarget,
    LogPosterior,
    PosteriorState,
    TemperingConfig,
    compute_w_i,
)
from .systems import OdeSystem, get_system

logger = logging.getLogger(__name__)

__all__ = [
    "Phi2Prior",
    "RunConfig",
    "InferenceResult",
    "evenly_spaced_superset",
    "phi2_prior",
    "fit_phi_sigma",
    "fit_phi_known_sigma",
    "init_x_interp",
    "init_theta",
    "init_unobserved",
    "run_magi",
    "default_beta",
]

I0_POINT_CAP = 401
UNOBSERVED_START_LEVELS = (0.1, 1.0, 10.0, 100.0)
UNOBSERVED_N_CANDIDATES = 60
UNOBSERVED_INVERT_ROUNDS = 2
UNOBSERVED_TOP_CANDIDATES = 4
UNOBSERVED_OFFSET_GRID = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
UNOBSERVED_TOP_POLISH = 4
UNOBSERVED_REFINE_ROUNDS = 2
N_MULTISTART = 5


@dataclass(frozen=True)
class Phi2Prior:
    """Gaussian prior on the kernel bandwidth (time units)."""

    mean: float
    sd: float

    def __post_init__(self):
        if self.mean <= 0 or self.sd <= 0:
            raise ValueError("phi2 prior mean and sd must be positive")

    def logpdf(self, phi2):
        return float(norm.logpdf(phi2, loc=self.mean, scale=self.sd))


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one inference run."""

    system: str
    seed: int = 0
    data: str | None = None
    grid_times: tuple | None = None
    grid_refine: int = 1
    beta: float | None = None
    band_size: int | None = None
    total_iterations: int = 20000
    burn_in: int = 10000
    leapfrog_steps: int = 100
    base_step: float | None = None
    sigma_known: dict = field(default_factory=dict)
    keep_chain: bool = False
    dry_run: bool = False

    def __post_init__(self):
        if self.beta is not None and self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.grid_refine < 1:
            raise ConfigError("grid_refine must be at least 1")


@dataclass
class InferenceResult:
    """Posterior summaries and run diagnostics.

    Trajectory summaries are on the data (output) scale even when the
    system is sampled in transformed coordinates.
    """

    system_name: str
    grid_times: np.ndarray
    theta_mean: np.ndarray
    theta_sd: np.ndarray
    theta_lower: np.ndarray
    theta_median: np.ndarray
    theta_upper: np.ndarray
    theta_ess: np.ndarray
    x_mean: np.ndarray
    x_lower: np.ndarray
    x_median: np.ndarray
    x_upper: np.ndarray
    sigma_mean: np.ndarray | None
    phi: tuple
    mu: np.ndarray
    beta: float
    band_size: int | None
    w_i: float
    acceptance_rate: float
    runtime_seconds: float
    seed: int
    config: RunConfig
    theta_draws: np.ndarray | None = None
    sigma_draws: np.ndarray | None = None
    chain_positions: np.ndarray | None = None

    @property
    def x0_hat(self):
        """Initial-condition estimate: inferred trajectory at the first grid time."""
        return self.x_mean[:, 0]


def default_beta(dim: int, grid_size: int, n_obs: int) -> float:
    """Recommended tempering exponent D|I|/N."""
    return dim * grid_size / n_obs


# ---------------------------------------------------------------------------
# stage (a): hyperparameter fitting
# ---------------------------------------------------------------------------

def _float_gcd(values, tol=1e-9):
    g = 0.0
    for v in values:
        v = abs(float(v))
        while v > tol:
            g, v = v, math.remainder(g, v)
            v = abs(v)
    return g


def evenly_spaced_superset(tau, cap: int = I0_POINT_CAP) -> np.ndarray:
    """Smallest evenly spaced time set containing all of ``tau``.

    Spacing is the (floating-point) gcd of the observation gaps; if that
    would exceed ``cap`` points the set falls back to ``cap`` evenly spaced
    points over the same range.
    """
    tau = np.asarray(tau, dtype=float)
    if tau.size < 2:
        return tau.copy()
    gaps = np.diff(tau)
    span = float(tau[-1] - tau[0])
    spacing = _float_gcd(gaps, tol=1e-9 * max(1.0, span))
    count = int(round(span / spacing)) + 1 if spacing > 0 else cap
    if count > cap:
        return np.linspace(tau[0], tau[-1], cap)
    times = tau[0] + spacing * np.arange(count)
    times[-1] = tau[-1]
    return times


def phi2_prior(y_interp, times, horizon) -> Phi2Prior:
    """Bandwidth prior from the discrete Fourier transform of the signal.

    The prior mean is half the period of the power-weighted mean frequency
    (DC bin excluded, one-sided spectrum); the sd places the horizon three
    standard deviations above the mean.
    """
    y = np.asarray(y_interp, dtype=float)
    times = np.asarray(times, dtype=float)
    if y.size < 4:
        raise ValueError("at least 4 evenly spaced points are required")
    spacing = np.diff(times)
    if np.abs(spacing - spacing[0]).max() > 1e-8 * max(1.0, abs(spacing[0])):
        raise ValueError("times must be evenly spaced")
    spectrum = np.fft.rfft(y)
    freqs = np.fft.rfftfreq(y.size, d=spacing[0])
    power = np.abs(spectrum[1:]) ** 2
    if power.sum() <= 0 or not np.any(power > 1e-12 * max(1.0, y.max() ** 2)):
        raise DegenerateSpectrumError("signal has no energy outside the DC bin")
    mean_freq = float(np.sum(freqs[1:] * power) / np.sum(power))
    mean = 0.5 / mean_freq
    sd = (horizon - mean) / 3.0
    if sd <= 0:
        # mean frequency below 1.5/T; keep a weakly informative width
        sd = horizon / 3.0
    return Phi2Prior(mean=mean, sd=sd)


def _fit_phi(y, times, horizon, sigma, rng, nu=2.01):
    """Shared hyperparameter optimizer; ``sigma=None`` means jointly fitted.

    Works on log-scale parameters; multi-start (1 heuristic + randomized
    perturbations); returns (KernelParams, sigma, best objective).
    """
    y = np.asarray(y, dtype=float)
    times = np.asarray(times, dtype=float)
    yc = y - y.mean()
    prior = phi2_prior(yc, times, horizon)
    scale = max(float(yc.std()), 1e-8)
    spacing = float(np.median(np.diff(times)))

    fit_sigma = sigma is None

    def objective(z):
        phi1 = math.exp(z[0])
        phi2 = math.exp(z[1])
        sig = math.exp(z[2]) if fit_sigma else sigma
        try:
            ll = gp_marginal_loglik(KernelParams(phi1, phi2, nu), sig, yc, times)
        except Exception:
            return 1e10
        value = -(ll + prior.logpdf(phi2))
        return value if np.isfinite(value) else 1e10

    lo = [math.log(1e-6 * scale**2), math.log(spacing / 10.0)]
    hi = [math.log(1e6 * scale**2 + 1e-12), math.log(10.0 * horizon)]
    start = [math.log(max(scale**2, 1e-8)), math.log(prior.mean)]
    if fit_sigma:
        lo.append(math.log(1e-5 * scale))
        hi.append(math.log(10.0 * scale))
        start.append(math.log(max(0.1 * scale, 1e-6)))
    bounds = list(zip(lo, hi))

    best = None
    starts = [np.array(start)]
    for _ in range(N_MULTISTART - 1):
        starts.append(np.clip(np.array(start) + rng.normal(0, 1, len(start)), lo, hi))
    for z0 in starts:
        res = minimize(objective, z0, method="L-BFGS-B", bounds=bounds)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None or not np.isfinite(best.fun) or best.fun >= 1e10:
        raise InitializationError(
            f"hyperparameter fitting failed from all {N_MULTISTART} starts"
        )
    phi = KernelParams(math.exp(best.x[0]), math.exp(best.x[1]), nu)
    sig = math.exp(best.x[2]) if fit_sigma else sigma
    return phi, float(sig), float(best.fun)


def fit_phi_sigma(y, times, horizon, rng=None, nu=2.01):
    """Jointly maximize the GP fit over (phi1, phi2, sigma)."""
    rng = np.random.default_rng(0) if rng is None else rng
    phi, sig, _ = _fit_phi(y, times, horizon, None, rng, nu)
    return phi, sig


def fit_phi_known_sigma(y, times, sigma, horizon, rng=None, nu=2.01):
    """Maximize the GP fit over (phi1, phi2) with the noise sd fixed."""
    rng = np.random.default_rng(0) if rng is None else rng
    phi, _, _ = _fit_phi(y, times, horizon, float(sigma), rng, nu)
    return phi


# ---------------------------------------------------------------------------
# stage (b): trajectory initialization
# ---------------------------------------------------------------------------

def init_x_interp(observations: ObservationSet, grid: DiscretizationGrid) -> np.ndarray:
    """Linear interpolation of the observations onto the grid.

    Exact at observation times, constant beyond the first/last observation;
    rows for unobserved components are left as NaN.
    """
    x = np.full((observations.dim, len(grid)), np.nan)
    for d, (t_d, y_d) in enumerate(zip(observations.times, observations.values)):
        if t_d.size == 0:
            continue
        x[d] = np.interp(grid.times, t_d, y_d)
    return x


# ---------------------------------------------------------------------------
# stage (c): parameter / unobserved-component initialization
# ---------------------------------------------------------------------------

def _theta_bounds_interior(system: OdeSystem, margin=1e-6):
    return [
        (lo + margin, hi if np.isfinite(hi) else np.inf) for lo, hi in system.bounds
    ]


def _theta_starts(system: OdeSystem, rng, count=N_MULTISTART):
    bounds = _theta_bounds_interior(system)
    heuristic = np.array(
        [min(max(1.0, lo), hi if np.isfinite(hi) else 1.0) for lo, hi in bounds]
    )
    starts = [heuristic]
    for _ in range(count - 1):
        draw = np.empty(len(bounds))
        for j, (lo, hi) in enumerate(bounds):
            if np.isfinite(hi):
                draw[j] = rng.uniform(lo, hi)
            else:
                draw[j] = rng.lognormal(0.0, 1.0)
        starts.append(draw)
    return starts, bounds


def init_theta(x, sigma, gp_models, system, grid, observations, tempering, rng=None):
    """Maximize the posterior over theta alone with x and sigma fixed."""
    rng = np.random.default_rng(0) if rng is None else rng
    lp = LogPosterior(system, grid, gp_models, observations, tempering)
    state = PosteriorState(np.asarray(x, dtype=float), np.zeros(system.n_params), np.asarray(sigma, dtype=float))

    def negative(theta):
        state.theta = theta
        try:
            value, _, grad_theta, _ = lp.value_and_grad(state)
        except Exception:
            return 1e10, np.zeros_like(theta)
        if not np.isfinite(value):
            return 1e10, np.zeros_like(theta)
        return -value, -grad_theta

    starts, bounds = _theta_starts(system, rng)
    best = None
    for theta0 in starts:
        res = minimize(negative, theta0, jac=True, method="L-BFGS-B", bounds=bounds)
        if np.isfinite(res.fun) and res.fun < 1e10 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise InitializationError("theta initialization failed from all starts")
    return np.asarray(best.x)


def init_unobserved(
    x_observed,
    observations: ObservationSet,
    system: OdeSystem,
    grid: DiscretizationGrid,
    gp_observed: dict,
    sigma,
    tempering,
    rng=None,
):
    """Initialize theta, the unobserved curves, and their hyperparameters.

    The posterior is multimodal in the unobserved components: local
    optimization from an uninformative start reliably collapses into modes
    where the coupling parameters vanish and the hidden curve goes flat.
    Good starting curves are found structurally instead:

      1. For many random theta candidates, solve for the unobserved value
         at each grid point that best matches the GP-estimated derivatives
         of the observed components (pointwise inversion of the observed
         equations), smooth the resulting curve, and re-fit theta; iterate.
      2. The observed equations often pin only a product of theta and the
         hidden curve, leaving its overall level free, so scan constant
         offsets of each candidate curve.
      3. Rank all starts (including flat curves at several levels) by a
         short joint optimization of the full posterior over theta, the
         unobserved hyperparameters, and *all* trajectories -- releasing
         the observed curves is essential, since with them pinned to noisy
         interpolation the collapsed modes score better than the truth.
      4. Fully polish the best-ranked starts and keep the winner.

    Returns (phi_by_component, mu_by_component, x_full, theta).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    observed = observations.observed
    unobs = [d for d in range(system.dim) if not observed[d]]
    if not unobs:
        raise ValueError("no unobserved component; use init_theta")
    n = len(grid)
    n_theta = system.n_params
    n_u = len(unobs)

    # hyperparameters of the unobserved components cannot be fitted from
    # data; optimize them jointly, but constrained to the range spanned by
    # the observed components (unconstrained, the density is unbounded as
    # phi1 -> 0 with the curve collapsing onto its mean)
    obs_phi1 = [gp_observed[d].phi.phi1 for d in range(system.dim) if observed[d]]
    obs_phi2 = [gp_observed[d].phi.phi2 for d in range(system.dim) if observed[d]]
    phi1_init = 2.0 * max(obs_phi1)
    phi2_init = float(np.clip(np.mean(obs_phi2), min(obs_phi2) / 2.0, max(obs_phi2)))
    phi1_range = (min(obs_phi1) / 2.0, 2.0 * max(obs_phi1))
    phi2_range = (min(obs_phi2) / 2.0, max(obs_phi2))

    theta_bounds = _theta_bounds_interior(system)
    phi_bounds = []
    for _ in unobs:
        phi_bounds.append((math.log(phi1_range[0]), math.log(phi1_range[1])))
        phi_bounds.append((math.log(phi2_range[0]), math.log(phi2_range[1])))
    log_phi0 = np.array([math.log(phi1_init), math.log(phi2_init)] * n_u)

    x_template = np.array(x_observed, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    obs_idx = [d for d in range(system.dim) if observed[d]]

    # GP derivative estimates of the observed components
    w_obs = {d: gp_observed[d].m @ (x_template[d] - gp_observed[d].mu) for d in obs_idx}

    # candidate level grid for the pointwise inversion, spanning well beyond
    # the range of the observed working-scale values
    x_obs_all = x_template[obs_idx]
    lo_v, hi_v = float(x_obs_all.min()), float(x_obs_all.max())
    spread = max(hi_v - lo_v, 1.0)
    levels = np.linspace(lo_v - 8.0 * spread, hi_v + 8.0 * spread, 161)

    # GP smoothing operator for the jagged inverted curves
    C0 = matern_gram(KernelParams(1.0, phi2_init), grid.times)
    smooth = C0 @ np.linalg.inv(C0 + 0.05 * np.eye(n))

    def invert_pointwise(theta, x_current):
        """Per grid point, pick the unobserved values minimizing the
        observed components' constraint residuals (coordinate-wise)."""
        x = x_current.copy()
        for d in unobs:
            best_res = np.full(n, np.inf)
            best_u = np.full(n, x[d] if np.all(np.isfinite(x[d])) else 0.0)
            x_test = x.copy()
            for u in levels:
                x_test[d] = u
                fx = system.f(x_test, theta, grid.times)
                res = np.zeros(n)
                for j in obs_idx:
                    res += (fx[j] - w_obs[j]) ** 2
                better = res < best_res
                best_res[better] = res[better]
                best_u[better] = u
            mu = best_u.mean()
            x[d] = mu + smooth @ (best_u - mu)
        return x

    def steady_state_pointwise(theta, x_current):
        """Per grid point, pick the unobserved values zeroing the unobserved
        components' own equations.  Unlike ``invert_pointwise`` this pins the
        absolute level, not just the shape, so no offset scan is needed."""
        x = x_current.copy()
        for d in unobs:
            best_res = np.full(n, np.inf)
            best_u = np.zeros(n)
            x_test = x.copy()
            for u in levels:
                x_test[d] = u
                fx = system.f(x_test, theta, grid.times)
                res = fx[d] ** 2
                better = res < best_res
                best_res[better] = res[better]
                best_u[better] = u
            mu = best_u.mean()
            x[d] = mu + smooth @ (best_u - mu)
        return x

    def build_models(log_phis, mu_u):
        models = []
        for d in range(system.dim):
            if observed[d]:
                models.append(gp_observed[d])
            else:
                k = unobs.index(d)
                phi = KernelParams(
                    math.exp(log_phis[2 * k]), math.exp(log_phis[2 * k + 1])
                )
                models.append(build_conditioning(phi, grid, mu=mu_u[k]))
        return models

    def theta_only_opt(theta0, x, log_phis, mu_u):
        lp = LogPosterior(system, grid, build_models(log_phis, mu_u), observations, tempering)
        state = PosteriorState(x.copy(), np.asarray(theta0, dtype=float), sigma)

        def negative(theta):
            state.theta = theta
            try:
                with np.errstate(all="ignore"):
                    value, _, grad_theta, _ = lp.value_and_grad(state)
            except Exception:
                return 1e10, np.zeros_like(theta)
            if not np.isfinite(value):
                return 1e10, np.zeros_like(theta)
            return -value, -grad_theta

        res = minimize(negative, theta0, jac=True, method="L-BFGS-B",
                       bounds=theta_bounds, options={"maxiter": 200})
        return np.asarray(res.x), float(res.fun)

    def joint_polish(theta0, log_phis0, x0, mu_u, maxiter, fit_phi=True):
        """L-BFGS over (theta, all trajectories), and the unobserved
        components' phi unless ``fit_phi`` is off.  Both the ranking and
        the final stage fit phi: with it frozen the short polish scores the
        degenerate flat modes above the oscillatory one."""
        if fit_phi:
            def parse(z):
                theta = z[:n_theta]
                log_phis = z[n_theta : n_theta + 2 * n_u]
                x = z[n_theta + 2 * n_u :].reshape(system.dim, n)
                return theta, log_phis, x
        else:
            fixed_phis = np.asarray(log_phis0, dtype=float)

            def parse(z):
                return z[:n_theta], fixed_phis, z[n_theta:].reshape(system.dim, n)

        def value_only(z):
            theta, log_phis, x = parse(z)
            try:
                with np.errstate(all="ignore"):
                    lp = LogPosterior(
                        system, grid, build_models(log_phis, mu_u), observations, tempering
                    )
                    value = lp.value(PosteriorState(x.copy(), theta, sigma))
            except Exception:
                return 1e10
            return -value if np.isfinite(value) else 1e10

        def negative(z):
            theta, log_phis, x = parse(z)
            try:
                with np.errstate(all="ignore"):
                    lp = LogPosterior(
                        system, grid, build_models(log_phis, mu_u), observations, tempering
                    )
                    value, gx, gt, _ = lp.value_and_grad(
                        PosteriorState(x.copy(), theta, sigma)
                    )
            except Exception:
                return 1e10, np.zeros_like(z)
            if not np.isfinite(value):
                return 1e10, np.zeros_like(z)
            grad = np.zeros_like(z)
            grad[:n_theta] = -gt
            if fit_phi:
                grad[n_theta + 2 * n_u :] = -gx.ravel()
                # unobserved-component hyperparameters: forward differences
                # (reusing the value already computed at z)
                h = 1e-4
                for j in range(2 * n_u):
                    zp = z.copy(); zp[n_theta + j] += h
                    grad[n_theta + j] = (value_only(zp) + value) / h
            else:
                grad[n_theta:] = -gx.ravel()
            return -value, grad

        free = [(-np.inf, np.inf)] * (system.dim * n)
        if fit_phi:
            bounds = theta_bounds + phi_bounds + free
            z0 = np.concatenate([theta0, log_phis0, x0.ravel()])
        else:
            bounds = theta_bounds + free
            z0 = np.concatenate([theta0, x0.ravel()])
        res = minimize(negative, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": maxiter})
        theta, log_phis, x = parse(res.x)
        return float(res.fun), np.asarray(theta), np.asarray(log_phis).copy(), np.array(x)

    # stage 1: structural candidates (random theta -> inversion -> theta fit)
    t_stage = time.perf_counter()
    candidates = []
    for _ in range(UNOBSERVED_N_CANDIDATES):
        theta = np.empty(n_theta)
        for j, (lo, hi) in enumerate(theta_bounds):
            lo_c = max(lo, 1e-3)
            hi_c = min(hi, 1e2) if np.isfinite(hi) else 1e2
            theta[j] = math.exp(rng.uniform(math.log(lo_c), math.log(hi_c)))
        x = x_template.copy()
        for d in unobs:
            x[d] = 0.0
        try:
            for _ in range(UNOBSERVED_INVERT_ROUNDS):
                x = invert_pointwise(theta, x)
                mu_u = [float(x[d].mean()) for d in unobs]
                theta, fun = theta_only_opt(theta, x, log_phi0, mu_u)
        except Exception:
            continue
        if np.isfinite(fun) and fun < 1e10:
            candidates.append((fun, theta, x))
    candidates.sort(key=lambda c: c[0])
    logger.info(
        "unobserved init: %d candidates in %.1fs",
        len(candidates), time.perf_counter() - t_stage,
    )

    # stage 2: starts = top candidates x level offsets, their steady-state
    # counterparts, plus flat curves
    starts = []
    for fun, theta, x in candidates[:UNOBSERVED_TOP_CANDIDATES]:
        for delta in UNOBSERVED_OFFSET_GRID:
            x2 = x.copy()
            for d in unobs:
                x2[d] = x[d] + delta
            starts.append((theta.copy(), x2))
        try:
            starts.append((theta.copy(), steady_state_pointwise(theta, x)))
        except Exception:
            pass
    theta_flat = np.array(
        [min(max(1.0, lo), hi if np.isfinite(hi) else 1.0) for lo, hi in theta_bounds]
    )
    for level in UNOBSERVED_START_LEVELS:
        value = math.log(level) if system.obs_to_working is np.log else level
        x2 = x_template.copy()
        for d in unobs:
            x2[d] = value
        starts.append((theta_flat.copy(), x2))

    # stage 3: rank by a short joint optimization with free trajectories
    t_stage = time.perf_counter()
    ranked = []
    for theta, x in starts:
        mu_u = [float(x[d].mean()) for d in unobs]
        try:
            fun, th2, lph2, x2 = joint_polish(theta, log_phi0, x, mu_u, maxiter=120)
        except Exception:
            continue
        if np.isfinite(fun) and fun < 1e10:
            ranked.append((fun, th2, lph2, x2, mu_u))
    ranked.sort(key=lambda c: c[0])
    logger.info(
        "unobserved init: ranked %d starts in %.1fs; best objectives %s",
        len(ranked), time.perf_counter() - t_stage,
        np.array2string(np.array([r[0] for r in ranked[:8]]), precision=1),
    )

    # stage 4: full polish of the best-ranked starts
    t_stage = time.perf_counter()
    best = None
    for fun, theta, log_phis, x, mu_u in ranked[:UNOBSERVED_TOP_POLISH]:
        try:
            out = joint_polish(theta, log_phis, x, mu_u, maxiter=600)
        except Exception:
            continue
        if np.isfinite(out[0]) and out[0] < 1e10 and (best is None or out[0] < best[0]):
            best = out + (mu_u,)
    if best is None:
        names = ", ".join(system.components[d] for d in unobs)
        raise InitializationError(
            f"joint initialization of unobserved component(s) {names} failed"
        )
    logger.info(
        "unobserved init: polish in %.1fs, objective %.2f",
        time.perf_counter() - t_stage, best[0],
    )

    # stage 5: refinement rounds -- re-invert from the polished theta (the
    # inversion is far more accurate there than at the random candidates)
    # and re-polish; repeat while the objective keeps improving
    t_stage = time.perf_counter()
    for _ in range(UNOBSERVED_REFINE_ROUNDS):
        fun0, theta, log_phis, x, mu_u = best
        try:
            x_inv = invert_pointwise(theta, x)
        except Exception:
            break
        improved = False
        for delta in UNOBSERVED_OFFSET_GRID:
            x2 = x_inv.copy()
            for d in unobs:
                x2[d] = x_inv[d] + delta
            mu2 = [float(x2[d].mean()) for d in unobs]
            try:
                # re-fit theta before polishing: a level shift of the
                # unobserved curve needs compensating parameter changes, and
                # without them the polish falls straight back to fun0's mode
                th2, _ = theta_only_opt(theta, x2, log_phis, mu2)
                fun_s, th_s, lph_s, x_s = joint_polish(
                    th2, log_phis, x2, mu2, maxiter=120
                )
            except Exception:
                continue
            if fun_s < fun0 - 0.5:
                try:
                    out = joint_polish(th_s, lph_s, x_s, mu2, maxiter=600)
                except Exception:
                    continue
                if np.isfinite(out[0]) and out[0] < best[0] - 0.5:
                    best = out + (mu2,)
                    improved = True
        if not improved:
            break
    logger.info(
        "unobserved init: refinement in %.1fs, objective %.2f",
        time.perf_counter() - t_stage, best[0],
    )
    _, theta, log_phis, x, mu_u = best
    phi_by_component = {
        d: KernelParams(math.exp(log_phis[2 * k]), math.exp(log_phis[2 * k + 1]))
        for k, d in enumerate(unobs)
    }
    mu_by_component = {d: mu_u[k] for k, d in enumerate(unobs)}
    return phi_by_component, mu_by_component, x, np.asarray(theta)


# ---------------------------------------------------------------------------
# stage (d)-(f): full run
# ---------------------------------------------------------------------------

def resolve_grid(observations: ObservationSet, config: RunConfig) -> DiscretizationGrid:
    """Explicit grid, or the union of observation times refined k-fold."""
    if config.grid_times is not None:
        grid = DiscretizationGrid(np.asarray(config.grid_times, dtype=float))
    else:
        base = observations.all_times()
        k = config.grid_refine
        pieces = [np.linspace(a, b, k + 1) for a, b in zip(base[:-1], base[1:])]
        grid = DiscretizationGrid(np.unique(np.concatenate(pieces)))
    tol = 1e-8 * max(1.0, float(np.abs(grid.times).max()))
    for name, t_d in zip(observations.component_names, observations.times):
        if t_d.size and np.abs(grid.times[np.searchsorted(grid.times, t_d).clip(max=len(grid) - 1)] - t_d).max() > tol:
            raise ConfigError(f"grid does not contain all observation times of {name}")
    return grid


def run_magi(observations: ObservationSet, system, config: RunConfig) -> InferenceResult:
    """Execute the full inference pipeline and summarize the chain."""
    t_start = time.perf_counter()
    if isinstance(system, str):
        system = get_system(system)
    if system.obs_to_working is not None:
        observations = observations.map_values(system.obs_to_working)

    grid = resolve_grid(observations, config)
    n = len(grid)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_fit = np.random.default_rng(seeds[0])
    rng_init = np.random.default_rng(seeds[1])
    hmc_seed = int(seeds[2].generate_state(1)[0])

    # (a) hyperparameters per observed component
    gp_models: list[GpConditioned | None] = [None] * system.dim
    sigma = np.ones(system.dim)
    observed = observations.observed
    for d in range(system.dim):
        if not observed[d]:
            continue
        tau, y = observations.times[d], observations.values[d]
        i0 = evenly_spaced_superset(tau)
        y_interp = np.interp(i0, tau, y)
        mu_d = float(y_interp.mean())
        known = observations.sigma_known[d]
        if known is not None:
            phi = fit_phi_known_sigma(y_interp, i0, known, grid.horizon, rng_fit)
            sigma[d] = known
        else:
            phi, sigma[d] = fit_phi_sigma(y_interp, i0, grid.horizon, rng_fit)
        gp_models[d] = build_conditioning(phi, grid, mu=mu_d, keep_dense=True)
        logger.info(
            "component %s: phi1=%.4g phi2=%.4g sigma=%.4g jitter=%.2g",
            observations.component_names[d], phi.phi1, phi.phi2, sigma[d],
            gp_models[d].jitter,
        )

    # (b) trajectory initialization
    x = init_x_interp(observations, grid)

    # (d) tempering (needed for initialization objectives too)
    beta = config.beta if config.beta is not None else default_beta(
        system.dim, n, observations.total_count
    )
    tempering = TemperingConfig(beta=beta)

    # (c) theta / unobserved initialization
    if all(observed):
        theta = init_theta(
            x, sigma, gp_models, system, grid, observations, tempering, rng_init
        )
    else:
        gp_observed = {d: gp_models[d] for d in range(system.dim) if observed[d]}
        phi_unobs, mu_unobs, x, theta = init_unobserved(
            x, observations, system, grid, gp_observed, sigma, tempering, rng_init
        )
        for d, phi in phi_unobs.items():
            gp_models[d] = build_conditioning(phi, grid, mu=mu_unobs[d], keep_dense=True)
    logger.info("initial theta: %s", np.array2string(theta, precision=4))

    # band-restriction sanity check on the initialized state
    state0 = PosteriorState(x, theta, sigma)
    if config.band_size is not None:
        for d in range(system.dim):
            g = gp_models[d]
            xc = x[d] - g.mu
            check_band_quadratic(g.C_inv, band_restrict(g.C_inv, config.band_size), xc)
            check_band_quadratic(g.K_inv, band_restrict(g.K_inv, config.band_size), xc)

    posterior = LogPosterior(
        system, grid, gp_models, observations, tempering, band_size=config.band_size
    )
    w_i = compute_w_i(x, theta, grid, gp_models, system)
    logger.info("constraint diagnostic W_I at initialization: %.4g", w_i)

    phi_tuple = tuple(g.phi for g in gp_models)
    mu = np.array([g.mu for g in gp_models])

    if config.dry_run:
        x_out = x if system.working_to_obs is None else system.working_to_obs(x)
        return InferenceResult(
            system_name=system.name,
            grid_times=grid.times,
            theta_mean=theta,
            theta_sd=np.zeros_like(theta),
            theta_lower=theta.copy(),
            theta_median=theta.copy(),
            theta_upper=theta.copy(),
            theta_ess=np.zeros_like(theta),
            x_mean=x_out,
            x_lower=x_out.copy(),
            x_median=x_out.copy(),
            x_upper=x_out.copy(),
            sigma_mean=sigma.copy(),
            phi=phi_tuple,
            mu=mu,
            beta=beta,
            band_size=config.band_size,
            w_i=w_i,
            acceptance_rate=float("nan"),
            runtime_seconds=time.perf_counter() - t_start,
            seed=config.seed,
            config=config,
        )

    # (e) sampling
    sigma_fixed = np.full(system.dim, np.nan)
    for d in range(system.dim):
        if not observed[d]:
            sigma_fixed[d] = 1.0  # placeholder; never enters the density
        elif observations.sigma_known[d] is not None:
            sigma_fixed[d] = observations.sigma_known[d]
    from .fastpath import make_target

    target = make_target(posterior, sigma_fixed)
    sampler_config = SamplerConfig(
        total_iterations=config.total_iterations,
        burn_in=config.burn_in,
        leapfrog_steps=config.leapfrog_steps,
        base_step=config.base_step,
        seed=hmc_seed,
    )
    chain = run_chain(target.pack(state0), sampler_config, target)
    summary = summarize_chain(chain, config.burn_in)

    # (f) assemble result on the output scale
    D, P = system.dim, system.n_params
    draws = summary.draws
    x_draws = draws[:, : D * n].reshape(-1, D, n)
    theta_draws = draws[:, D * n : D * n + P]
    if system.working_to_obs is not None:
        x_draws = system.working_to_obs(x_draws)
    x_lo, x_med, x_hi = np.percentile(x_draws, [2.5, 50.0, 97.5], axis=0)

    sigma_draws = None
    sigma_mean = sigma.copy()
    if target.n_sigma:
        sigma_draws = np.exp(draws[:, D * n + P :])
        sigma_mean[target.free_sigma] = sigma_draws.mean(axis=0)

    theta_lo, theta_med, theta_hi = np.percentile(theta_draws, [2.5, 50.0, 97.5], axis=0)
    theta_slice = slice(D * n, D * n + P)
    result = InferenceResult(
        system_name=system.name,
        grid_times=grid.times,
        theta_mean=theta_draws.mean(axis=0),
        theta_sd=theta_draws.std(axis=0, ddof=1),
        theta_lower=theta_lo,
        theta_median=theta_med,
        theta_upper=theta_hi,
        theta_ess=summary.ess[theta_slice],
        x_mean=x_draws.mean(axis=0),
        x_lower=x_lo,
        x_median=x_med,
        x_upper=x_hi,
        sigma_mean=sigma_mean,
        phi=phi_tuple,
        mu=mu,
        beta=beta,
        band_size=config.band_size,
        w_i=w_i,
        acceptance_rate=summary.acceptance_rate,
        runtime_seconds=time.perf_counter() - t_start,
        seed=config.seed,
        config=config,
        theta_draws=theta_draws,
        sigma_draws=sigma_draws,
        chain_positions=chain.positions if config.keep_chain else None,
    )
    logger.info(
        "run complete in %.1fs, acceptance %.2f",
        result.runtime_seconds, result.acceptance_rate,
    )
    return result
