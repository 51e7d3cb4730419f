"""Self-conditioned diffusion models as representation learners, in numpy."""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DataError, DierError, DimensionError,
                     FormatError, NumericError, UsageError, VersionError)

__all__ = [
    "__version__", "CheckpointError", "ConfigError", "DataError", "DierError",
    "DimensionError", "FormatError", "NumericError", "UsageError", "VersionError",
]
