"""Exception types raised across the package."""


class DomainError(ValueError):
    """Input outside the domain an operation is defined on (e.g. non-finite state)."""


class ConstructionError(ValueError):
    """An object could not be built from the given dimensions or parameters."""


class SolverError(RuntimeError):
    """An iterative solver failed to converge."""


class NumericError(FloatingPointError):
    """A loss or bound evaluated to a non-finite number."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SamplingError(RuntimeError):
    """Sampling from a level set is impossible (e.g. the level is zero)."""


class StartupError(RuntimeError):
    """Training could not obtain a non-empty initial certificate."""


class ConfigError(ValueError):
    """Experiment configuration is invalid."""
