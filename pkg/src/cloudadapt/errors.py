"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated by the caller."""


class DataError(ValueError):
    """Input data (masks, files, labels) is malformed or out of range."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class CheckpointError(DataError):
    """A checkpoint file failed to load or verify."""


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss."""
