"""Exception types shared across the package."""


class MetanormError(Exception):
    """Base class for all package errors."""


class ShapeError(MetanormError):
    """Operand shapes are incompatible (broadcast or dimension mismatch)."""


class PartitionError(MetanormError):
    """A grouping scheme does not divide the channel dimension."""


class NumericError(MetanormError):
    """An operation hit an invalid numeric condition (e.g. division by exact zero)."""


class ConfigError(MetanormError):
    """Experiment configuration is malformed or contains unknown keys."""


class CheckpointError(MetanormError):
    """Checkpoint file is malformed or fails its integrity check."""


class DataFormatError(MetanormError):
    """A dataset file does not match the expected binary layout."""


class DivergenceError(MetanormError):
    """Training produced a non-finite loss."""
