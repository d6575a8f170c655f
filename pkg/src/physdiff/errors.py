"""Exception types shared across the package."""


class PhysDiffError(Exception):
    """Base class for all package errors."""


class DimensionError(PhysDiffError, ValueError):
    """Tensor shapes do not conform; message carries both shapes."""


class ConfigError(PhysDiffError, ValueError):
    """A configuration value is out of range or a key is unknown."""


class ParseError(PhysDiffError, ValueError):
    """Malformed input file (CSV, manifest, blob header)."""


class ValidationError(PhysDiffError, ValueError):
    """A physical value is outside its allowed range."""


class AlignmentError(PhysDiffError, ValueError):
    """Forecast/truth records could not be joined on their keys."""


class DivergenceError(PhysDiffError, RuntimeError):
    """Non-finite values appeared during sampling or training."""


class CheckpointError(PhysDiffError, RuntimeError):
    """Checkpoint file is truncated, versioned wrong, or mismatched."""
