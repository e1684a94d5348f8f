"""Exception hierarchy shared across the toolkit."""


class VLTrimError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(VLTrimError, ValueError):
    """Shapes or axes of the operands are incompatible."""


class NumericError(VLTrimError, ArithmeticError):
    """Non-finite values were found where finite ones are required."""


class ContractError(VLTrimError, ValueError):
    """A documented precondition of an operation was violated."""


class ParameterError(VLTrimError, ValueError):
    """A scalar parameter (temperature, K, rate, ...) is out of range."""


class EmptyModalityError(DimensionError):
    """Attention context contains zero tokens."""


class BehindCameraError(VLTrimError, ValueError):
    """A 3D point does not lie in front of the camera."""


class NoIntersectionError(VLTrimError, ValueError):
    """A viewing ray does not hit the ground plane in front of the camera."""


class ConfigError(VLTrimError, ValueError):
    """Run configuration is malformed, has unknown keys, or invalid values."""


class CheckpointError(VLTrimError, ValueError):
    """Checkpoint bytes are malformed or carry an unsupported version."""
