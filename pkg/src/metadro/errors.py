"""Exception types raised across the package."""


class MetadroError(Exception):
    """Base class for all package errors."""


class DimensionError(MetadroError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(MetadroError, ValueError):
    """Misuse of :func:`metadro.autodiff.grad` (e.g. non-scalar output)."""


class IngestError(MetadroError, ValueError):
    """An embedding file could not be loaded or failed validation."""


class StratumError(MetadroError, ValueError):
    """No class satisfies a stratum filter."""


class EpisodeError(MetadroError, ValueError):
    """A store cannot supply the requested episode."""


class RankingError(MetadroError, ValueError):
    """Group ranking was requested on empty statistics."""


class ConfigError(MetadroError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingAborted(MetadroError, RuntimeError):
    """Training hit a non-finite objective."""

    def __init__(self, iteration: int, group_losses: dict):
        detail = ", ".join(f"{g}={v!r}" for g, v in sorted(group_losses.items()))
        super().__init__(f"non-finite loss at iteration {iteration} (groups: {detail})")
        self.iteration = iteration
        self.group_losses = group_losses


class NumericError(MetadroError, FloatingPointError):
    """An operation produced a non-finite value."""
