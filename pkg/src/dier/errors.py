"""Exception types shared across the package."""


class DierError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DierError, ValueError):
    """Incompatible tensor shapes or model/input resolutions."""


class UsageError(DierError, RuntimeError):
    """An API was called in a state where the call makes no sense."""


class ConfigError(DierError, ValueError):
    """Invalid configuration value or combination of values."""


class FormatError(DierError, ValueError):
    """A file on disk does not match its declared binary layout."""


class VersionError(FormatError):
    """A checkpoint was written by an incompatible format version."""


class NumericError(DierError, FloatingPointError):
    """Training produced a non-finite value."""


class DataError(DierError, OSError):
    """A dataset could not be located or decoded."""


class CheckpointError(DierError, OSError):
    """A checkpoint could not be read or is inconsistent with the request."""
