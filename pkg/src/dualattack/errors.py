"""Exception hierarchy shared by every layer of the package."""


class DualAttackError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DualAttackError, ValueError):
    pass


class NonFiniteError(DualAttackError, FloatingPointError):
    pass


class LabelError(DualAttackError, ValueError):
    pass


class ConfigError(DualAttackError, ValueError):
    pass


class PolicyError(DualAttackError, ValueError):
    pass


class DegenerateGradientError(DualAttackError, ArithmeticError):
    pass


class TrainingDivergedError(DualAttackError, ArithmeticError):
    pass


class CheckpointError(DualAttackError):
    """Base class for container read/write failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TensorCountError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class ZooGateError(DualAttackError):
    """A zoo model missed the minimum eval accuracy."""
