"""Exception hierarchy shared across the package."""


class PrunekitError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PrunekitError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(PrunekitError):
    """An argument violates a documented precondition."""


class DegenerateDistributionError(PrunekitError):
    """A weight distribution has zero spread where spread is required."""


class DivergenceError(PrunekitError):
    """Training produced a non-finite loss or gradient."""


class ConfigError(PrunekitError):
    """Base class for experiment-configuration problems (CLI exit code 2)."""


class ConfigSyntaxError(ConfigError):
    """The config file could not be parsed; message carries line/column."""


class UnknownKeyError(ConfigError):
    """The config contains a key the schema does not define."""


class InconsistentConfigError(ConfigError):
    """Config keys are individually valid but mutually inconsistent."""


class CheckpointError(PrunekitError):
    """Base class for checkpoint I/O problems (CLI exit code 4)."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic or format version does not match."""


class CheckpointChecksumError(CheckpointError):
    """Stored checksum does not match the file contents."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared payload was read."""


class DatasetError(PrunekitError):
    """Dataset files or manifest entries are inconsistent."""
