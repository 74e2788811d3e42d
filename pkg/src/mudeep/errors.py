"""Exception hierarchy shared across the package."""


class MuDeepError(Exception):
    """Base class for all package errors."""


class ShapeError(MuDeepError, ValueError):
    """Operand shapes do not agree."""


class GeometryError(MuDeepError, ValueError):
    """A window/stride/pad combination yields an empty or invalid output."""


class ConfigError(MuDeepError, ValueError):
    """Invalid model, training or run configuration."""


class DataFormatError(MuDeepError, ValueError):
    """Malformed manifest, image or other input file."""


class CheckpointError(MuDeepError, ValueError):
    """Checkpoint file is corrupt, of the wrong version or incompatible."""


class ProtocolError(MuDeepError, ValueError):
    """Evaluation protocol precondition violated."""


class NumericError(MuDeepError, ArithmeticError):
    """Non-finite value encountered during training or checking."""
