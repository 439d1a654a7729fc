"""Exception types shared across the package."""


class IvrError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(IvrError):
    """Invalid configuration value or schema violation."""


class ShapeError(IvrError):
    """Array shape inconsistent with the declared contract."""


class SpaceMismatchError(IvrError):
    """Latent-space tag does not match the codec/solver it is used with."""


class CheckpointError(IvrError):
    """Checkpoint file corrupt, wrong version, or wrong component."""


class DependencyError(IvrError):
    """A required artifact (checkpoint, dataset) is missing."""


class TrainingDivergence(IvrError):
    """A training loss became non-finite; carries diagnostics."""
