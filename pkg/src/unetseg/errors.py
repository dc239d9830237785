"""Exception hierarchy shared by every unetseg module."""


class UNetSegError(Exception):
    """Base class for all errors raised by unetseg."""


# tensor core
class ShapeMismatchError(UNetSegError, ValueError):
    pass


class EmptyTensorError(UNetSegError, ValueError):
    pass


class NotScalarError(UNetSegError, ValueError):
    pass


class DetachedTensorError(UNetSegError, RuntimeError):
    pass


class NonFiniteGradientError(UNetSegError, FloatingPointError):
    pass


class DomainError(UNetSegError, ValueError):
    """An op was given input outside its mathematical domain (e.g. log of 0)."""


# layers
class InvalidGeometryError(UNetSegError, ValueError):
    pass


class OddSpatialDimError(UNetSegError, ValueError):
    pass


class DegenerateBatchError(UNetSegError, ValueError):
    pass


class CropLargerThanInputError(UNetSegError, ValueError):
    pass


# model / checkpoint
class InvalidConfigError(UNetSegError, ValueError):
    pass


class DepthTooDeepError(InvalidConfigError):
    def __init__(self, message: str, max_depth: int):
        super().__init__(message)
        self.max_depth = max_depth


class FormatError(UNetSegError, ValueError):
    pass


class VersionUnsupportedError(FormatError):
    pass


# losses / metrics
class NegativeGammaError(UNetSegError, ValueError):
    pass


class NonBinaryMaskError(UNetSegError, ValueError):
    pass


# optim
class EpochOutOfRangeError(UNetSegError, ValueError):
    pass


# data / training
class DataError(UNetSegError):
    pass


class UnsupportedFormatError(DataError, ValueError):
    pass


class DimensionMismatchError(DataError, ValueError):
    pass


class EmptyDatasetError(DataError, ValueError):
    pass


class ConfigError(UNetSegError, ValueError):
    pass


class DivergedLossError(UNetSegError, FloatingPointError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite training loss {value!r} at epoch {epoch}")
        self.epoch = epoch
        self.value = value
