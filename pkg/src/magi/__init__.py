"""Bayesian inference of ODE parameters and trajectories from noisy,
sparse, and partially observed time series, without numerical integration
during inference.

The posterior couples a Gaussian process prior over each system component
with the ODE constraint enforced on a discretization grid; Hamiltonian
Monte Carlo samples trajectories, parameters, and (when unknown) noise
levels jointly.  A fixed-step RK4 integrator is provided separately for
data simulation and evaluation only.
"""

from .errors import (
    ConfigError,
    DegenerateSpectrumError,
    DomainError,
    IllConditionedKernelError,
    InitializationError,
    IntegrationDomainError,
    MagiError,
)
from .kernels import (
    DiscretizationGrid,
    GpConditioned,
    KernelParams,
    build_conditioning,
    gp_marginal_loglik,
    matern_derivatives,
    matern_eval,
    matern_gram,
)
from .banded import BandedMatrix, BandDivergenceWarning, band_mask, band_restrict
from .observations import ObservationSet
from .systems import OdeSystem, get_system, log_transform, register_system, registered_systems
from .posterior import (
    FlatTarget,
    LogPosterior,
    PosteriorState,
    TemperingConfig,
    compute_w_i,
    log_posterior,
    log_posterior_gradient,
)
from .hmc import (
    Chain,
    ChainSummary,
    SamplerConfig,
    effective_sample_size,
    hmc_step,
    leapfrog,
    run_chain,
    summarize_chain,
)
from .integrate import (
    NoiseModel,
    SolvedTrajectory,
    parameter_rmse,
    rk4_solve,
    simulate_dataset,
    trajectory_rmse,
)
from .pipeline import (
    InferenceResult,
    Phi2Prior,
    RunConfig,
    default_beta,
    evenly_spaced_superset,
    fit_phi_known_sigma,
    fit_phi_sigma,
    init_theta,
    init_unobserved,
    init_x_interp,
    phi2_prior,
    run_magi,
)
from .io import load_config, load_observations, parse_config, write_results
from .replicate import BenchmarkPreset, get_preset, preset_names, replicate_preset

__version__ = "0.1.0"
