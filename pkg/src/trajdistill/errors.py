"""Exception hierarchy shared by every trajdistill module."""


class TrajDistillError(Exception):
    """Base class for all errors raised by this package."""


# tensor core
class ShapeError(TrajDistillError, ValueError):
    pass


class LabelError(TrajDistillError, ValueError):
    pass


class ContractError(TrajDistillError, ValueError):
    pass


class NumericError(TrajDistillError, ArithmeticError):
    pass


# audio features
class MalformedWav(TrajDistillError, ValueError):
    pass


class UnsupportedEncoding(TrajDistillError, ValueError):
    pass


class TooShort(TrajDistillError, ValueError):
    pass


# data io
class MissingFile(TrajDistillError, FileNotFoundError):
    pass


class SplitLeak(TrajDistillError, ValueError):
    pass


class ShapeMismatch(TrajDistillError, ValueError):
    pass


class EmptySplit(TrajDistillError, ValueError):
    pass


class TooFewSpeakers(TrajDistillError, ValueError):
    pass


class CorruptFile(TrajDistillError, ValueError):
    pass


# teacher trajectories
class ArchMismatch(TrajDistillError, ValueError):
    pass


class PoolError(TrajDistillError, ValueError):
    pass


# distillation / evaluation
class InsufficientClassSamples(TrajDistillError, ValueError):
    pass


class NoTeacherMotion(TrajDistillError, ArithmeticError):
    pass


class EmptyClass(TrajDistillError, ValueError):
    pass


class ConfigError(TrajDistillError, ValueError):
    pass
