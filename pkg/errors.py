"""
CTRForge Errors
Exception hierarchy shared by all modules.
Each class carries the exit code the command line reports for it.
"""

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class CTRForgeError(Exception):
    """Base class for every error raised by the library."""

    exit_code = EXIT_RUNTIME


class UsageError(CTRForgeError):
    """An API or command was called in a state where it cannot run."""

    exit_code = EXIT_USAGE


class ConfigError(UsageError):
    """A configuration value is missing, unknown, or out of range."""


class IngestionError(UsageError):
    """Input data could not be read or had too many malformed lines."""


class CheckpointError(UsageError):
    """A checkpoint or vocabulary file is corrupt or from another format."""


class EmbeddingLookupError(UsageError, LookupError):
    """A categorical index falls outside its field's embedding table."""

    def __init__(self, field, index, bound):
        super().__init__(f"field {field}: index {index} outside [0, {bound})")
        self.field = field
        self.index = index
        self.bound = bound


class ShapeError(CTRForgeError, ValueError):
    """Operands of a numeric operation have incompatible shapes."""


class NumericError(CTRForgeError, ArithmeticError):
    """A numeric operation produced NaN or Inf."""


class TrainingError(CTRForgeError):
    """Training hit a non-finite loss or gradient."""


class MetricError(CTRForgeError):
    """A metric is undefined for the given scores and labels."""
