"""Hamiltonian Monte Carlo with leapfrog proposals and step-size adaptation.

One iteration draws a fresh standard-normal momentum, picks a leapfrog step
size uniformly from [L, 2L], integrates a fixed number of leapfrog steps,
and applies the Metropolis accept/reject rule for the Hamiltonian
H = U(q) + p'p/2 with U the negative log target density.  During burn-in L
is multiplied by 1.005 whenever the trailing-window acceptance rate is
above 90% and by 0.995 when below 60%; adaptation freezes after burn-in.

Hard parameter bounds are handled by reflecting the position (and negating
the corresponding momentum) at the boundary, which preserves volume.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InitializationError

__all__ = [
    "SamplerConfig",
    "Chain",
    "ChainSummary",
    "DivergentTrajectory",
    "leapfrog",
    "hmc_step",
    "adapt_step_size",
    "run_chain",
    "summarize_chain",
    "effective_sample_size",
]


class DivergentTrajectory(Exception):
    """Leapfrog integration hit a non-finite gradient or position."""


@dataclass(frozen=True)
class SamplerConfig:
    total_iterations: int = 20000
    burn_in: int = 10000
    leapfrog_steps: int = 100
    base_step: float | None = None   # default 0.01 / leapfrog_steps
    adapt_up: float = 1.005
    adapt_down: float = 0.995
    target_low: float = 0.60
    target_high: float = 0.90
    adapt_window: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.burn_in >= self.total_iterations:
            raise ValueError("burn_in must be smaller than total_iterations")
        if self.leapfrog_steps < 1:
            raise ValueError("at least one leapfrog step is required")
        if not (0 < self.adapt_down < 1 < self.adapt_up):
            raise ValueError("adaptation factors must bracket 1")
        if not (0 < self.target_low < self.target_high < 1):
            raise ValueError("acceptance band must satisfy 0 < low < high < 1")

    @property
    def initial_step(self) -> float:
        if self.base_step is not None:
            return float(self.base_step)
        return 0.01 / self.leapfrog_steps


@dataclass
class Chain:
    """Stored HMC output: every post-initial state plus traces."""

    positions: np.ndarray      # (iterations, dim)
    accepted: np.ndarray       # (iterations,) bool
    step_trace: np.ndarray     # (iterations,) value of L at each iteration
    log_probs: np.ndarray      # (iterations,)
    config: SamplerConfig

    def acceptance_rate(self, start=0, stop=None) -> float:
        window = self.accepted[start:stop]
        return float(window.mean()) if window.size else float("nan")


def _reflect(q, p, lower, upper):
    """Reflect out-of-bounds coordinates back into [lower, upper]."""
    for _ in range(100):
        low = q < lower
        if np.any(low):
            q[low] = 2.0 * lower[low] - q[low]
            p[low] = -p[low]
        high = q > upper
        if np.any(high):
            q[high] = 2.0 * upper[high] - q[high]
            p[high] = -p[high]
        if not (np.any(q < lower) or np.any(q > upper)):
            return
    raise DivergentTrajectory("position could not be reflected into bounds")


def leapfrog(q, p, step, n_steps, grad_fn, lower=None, upper=None):
    """Integrate Hamiltonian dynamics for ``n_steps`` leapfrog steps.

    Interior momentum half-steps are merged into full steps.  Raises
    :class:`DivergentTrajectory` on non-finite gradients or positions.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)

    # reflection only ever acts on finitely bounded coordinates
    active = None
    if lower is not None:
        active = np.flatnonzero(np.isfinite(lower) | np.isfinite(upper))
        if active.size:
            lower_a = lower[active]
            upper_a = upper[active]
        else:
            active = None

    def checked_grad(position):
        g = grad_fn(position)
        if not np.all(np.isfinite(g)):
            raise DivergentTrajectory("non-finite gradient")
        return g

    def position_step(step):
        q_new = q + step * p
        if active is not None:
            qa = q_new[active]
            pa = p[active]
            _reflect(qa, pa, lower_a, upper_a)
            q_new[active] = qa
            p[active] = pa
        if not np.all(np.isfinite(q_new)):
            raise DivergentTrajectory("non-finite position")
        return q_new

    p -= 0.5 * step * checked_grad(q)
    for _ in range(n_steps - 1):
        q = position_step(step)
        p -= step * checked_grad(q)
    q = position_step(step)
    p -= 0.5 * step * checked_grad(q)
    return q, p


def hmc_step(q, log_prob, target, step, n_steps, rng, lower=None, upper=None):
    """One HMC transition; returns (q', log_prob', accepted)."""
    p = rng.standard_normal(q.size)
    h_current = -log_prob + 0.5 * float(p @ p)

    fast = getattr(target, "run_leapfrog", None)
    if fast is not None:
        q_star, p_star, log_prob_star, ok = fast(q, p, step, n_steps)
        if not ok:
            return q, log_prob, False
    else:
        cache = {}

        def grad_u(position):
            value, grad = target.log_prob_and_grad(position)
            cache["value"] = value
            cache["position"] = position
            return -grad

        try:
            q_star, p_star = leapfrog(q, p, step, n_steps, grad_u, lower, upper)
        except DivergentTrajectory:
            return q, log_prob, False

        # the last leapfrog sub-step evaluated the gradient (and value) at q*
        log_prob_star = (
            cache["value"] if cache.get("position") is q_star else target.log_prob(q_star)
        )
    h_star = -log_prob_star + 0.5 * float(p_star @ p_star)
    delta = h_star - h_current
    if not np.isfinite(delta) or abs(delta) > 1000.0:
        return q, log_prob, False
    if np.log(rng.uniform()) < -delta:
        return q_star, log_prob_star, True
    return q, log_prob, False


def adapt_step_size(L, acceptance_window, config: SamplerConfig = SamplerConfig()):
    """Scale L by the configured factors based on window acceptance."""
    rate = float(np.mean(acceptance_window))
    if rate > config.target_high:
        return L * config.adapt_up
    if rate < config.target_low:
        return L * config.adapt_down
    return L


def run_chain(initial, config: SamplerConfig, target) -> Chain:
    """Run a full HMC chain from a flat initial position.

    ``target`` must expose ``log_prob(q)`` and ``log_prob_and_grad(q)``;
    optional ``lower``/``upper`` attributes trigger boundary reflection.
    Deterministic for a fixed config seed.
    """
    q = np.asarray(initial, dtype=float).copy()
    rng = np.random.default_rng(config.seed)
    lower = getattr(target, "lower", None)
    upper = getattr(target, "upper", None)

    log_prob = target.log_prob(q)
    if not np.isfinite(log_prob):
        raise InitializationError("initial state has non-finite log-posterior")

    iters = config.total_iterations
    positions = np.empty((iters, q.size))
    accepted = np.empty(iters, dtype=bool)
    step_trace = np.empty(iters)
    log_probs = np.empty(iters)
    L = config.initial_step

    for i in range(iters):
        step = rng.uniform(L, 2.0 * L)
        q, log_prob, acc = hmc_step(
            q, log_prob, target, step, config.leapfrog_steps, rng, lower, upper
        )
        positions[i] = q
        accepted[i] = acc
        step_trace[i] = L
        log_probs[i] = log_prob
        if i < config.burn_in:
            window = accepted[max(0, i + 1 - config.adapt_window) : i + 1]
            L = adapt_step_size(L, window, config)

    chain = Chain(positions, accepted, step_trace, log_probs, config)
    tail = chain.acceptance_rate(max(0, config.burn_in - 1000), config.burn_in)
    if not (config.target_low <= tail <= config.target_high):
        warnings.warn(
            f"acceptance rate {tail:.2f} over the last 1000 burn-in iterations "
            f"is outside [{config.target_low}, {config.target_high}]",
            stacklevel=2,
        )
    return chain


def effective_sample_size(draws) -> float:
    """ESS via the autocorrelation sum, truncated at the first negative
    paired (Geyer initial positive sequence) estimate."""
    draws = np.asarray(draws, dtype=float)
    n = draws.size
    if n < 4:
        return float(n)
    centered = draws - draws.mean()
    var = float(centered @ centered) / n
    if var == 0.0:
        return float(n)
    # autocovariance via FFT
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    fft = np.fft.rfft(centered, size)
    acov = np.fft.irfft(fft * np.conj(fft), size)[:n].real / n
    rho = acov / var
    total = 0.0
    for k in range(1, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        total += pair
    return float(n / (1.0 + 2.0 * total))


@dataclass
class ChainSummary:
    """Per-coordinate posterior summaries of the post-burn-in draws."""

    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray     # 2.5 percentile
    median: np.ndarray
    upper: np.ndarray     # 97.5 percentile
    ess: np.ndarray
    acceptance_rate: float
    draws: np.ndarray = field(repr=False)


def summarize_chain(chain: Chain, burn_in: int | None = None) -> ChainSummary:
    """Posterior means, 2.5/50/97.5 percentile bands, and ESS per coordinate."""
    if burn_in is None:
        burn_in = chain.config.burn_in
    draws = chain.positions[burn_in:]
    if draws.shape[0] == 0:
        raise ValueError("no draws remain after burn-in")
    lower, median, upper = np.percentile(draws, [2.5, 50.0, 97.5], axis=0)
    ess = np.array([effective_sample_size(draws[:, j]) for j in range(draws.shape[1])])
    return ChainSummary(
        mean=draws.mean(axis=0),
        sd=draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1]),
        lower=lower,
        median=median,
        upper=upper,
        ess=ess,
        acceptance_rate=chain.acceptance_rate(burn_in),
        draws=draws,
    )
