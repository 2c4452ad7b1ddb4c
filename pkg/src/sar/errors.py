"""Exception hierarchy. The CLI maps each family to an exit code."""


class SARError(Exception):
    """Base class for all package errors."""


class ConfigError(SARError):
    """Invalid run configuration (unknown key, bad value, parse failure)."""


class DataError(SARError):
    """Input data cannot be used (bad file, too-small volume, bad labels)."""


class FormatError(DataError):
    """A volume file does not match its declared format."""


class SamplingError(DataError):
    """A volume cannot be sampled under the requested plan."""


class CheckpointError(SARError):
    """A checkpoint is unreadable, incompatible, or incomplete."""


class NumericalError(SARError):
    """Training produced a non-finite value."""


class ShapeError(ValueError, SARError):
    """Tensor shape does not match the architecture."""
