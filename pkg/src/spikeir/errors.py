"""Exception types shared across the package."""


class SpikeIRError(Exception):
    """Base class for all package errors."""


class DimensionError(SpikeIRError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(SpikeIRError, ValueError):
    """A configuration value is out of its valid range."""


class ContractError(SpikeIRError, RuntimeError):
    """A call violated an API precondition."""


class NumericError(SpikeIRError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class ParseError(SpikeIRError, ValueError):
    """An input file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(SpikeIRError, ValueError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass
