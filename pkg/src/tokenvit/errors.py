"""Exception taxonomy shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class ShapeError(EngineError):
    """Operand dimensions are inconsistent."""


class NumericError(EngineError):
    """Non-finite or otherwise numerically invalid input."""


class ConfigError(EngineError):
    """A configuration value violates its invariants."""


class UsageError(EngineError):
    """The caller combined arguments in an unsupported way."""


class BoundaryError(EngineError):
    """A finite-difference probe crossed a selection boundary."""


class WeightFormatError(EngineError):
    """Base class for weight-container load failures."""


class BadMagicError(WeightFormatError):
    """Container does not start with the expected magic bytes."""


class TruncatedContainerError(WeightFormatError):
    """Container ends before the declared payload."""


class OverlappingTensorsError(WeightFormatError):
    """Container header declares overlapping payload regions."""


class TensorShapeMismatchError(WeightFormatError):
    """A loaded tensor does not match the shape the config requires."""


class ImageFormatError(EngineError):
    """Unsupported or corrupt image file."""
