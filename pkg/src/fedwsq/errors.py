"""Exception hierarchy shared across the simulator."""


class FedwsqError(Exception):
    """Base class for all simulator errors."""


class DimensionError(FedwsqError):
    """Array shapes are incompatible with the requested operation."""


class ConfigError(FedwsqError):
    """A configuration value or key is invalid."""


class TrainingError(FedwsqError):
    """Local training produced a non-finite quantity."""


class EncodingError(FedwsqError):
    """A value cannot be quantized or packed."""


class DecodingError(FedwsqError):
    """A wire payload cannot be decoded."""


class FormatError(FedwsqError):
    """An external file does not match its expected binary format."""


class NumericalError(FedwsqError):
    """An iterative numerical procedure failed to converge."""
