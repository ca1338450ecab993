"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry to normalize over."""


class ConfigError(ValueError):
    """Invalid or inconsistent run/model configuration."""


class DataError(ValueError):
    """Corpus or embedding data is malformed or missing."""


class CheckpointError(DataError):
    """Checkpoint container violates its manifest or expected layout."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite arithmetic is required."""
