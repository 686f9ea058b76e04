"""Exception types shared across the package."""


class MagiError(Exception):
    """Base class for errors raised by this package."""


class IllConditionedKernelError(MagiError):
    """Kernel Gram matrix could not be factorized even at maximum jitter."""


class DomainError(MagiError):
    """State or parameter vector left the domain of an ODE right-hand side."""


class IntegrationDomainError(MagiError):
    """Numerical integration produced a state outside the system domain."""


class DegenerateSpectrumError(MagiError):
    """Signal has no energy outside the DC bin; bandwidth heuristic undefined."""


class InitializationError(MagiError):
    """An initialization optimization failed to converge from every start."""


class ConfigError(MagiError):
    """Invalid or inconsistent run configuration."""
