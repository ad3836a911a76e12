"""Exception types shared across the package."""


class DualSedError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DualSedError):
    """Invalid configuration value or combination."""


class ManifestError(DualSedError):
    """Corpus manifest cannot be parsed or fails validation."""


class BranchContractError(DualSedError):
    """An operation was applied to the wrong feature branch."""


class CheckpointError(DualSedError):
    """Checkpoint missing, incompatible or of unknown version."""


class DivergenceError(DualSedError):
    """Training produced a non-finite loss."""
