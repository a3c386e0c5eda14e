"""Exception types raised across the package."""


class GsaError(ValueError):
    """Base class for all validation errors raised by gsakit."""


class DivisibilityError(GsaError):
    pass


class ZeroSizeError(GsaError):
    pass


class IndexOutOfRange(GsaError, IndexError):
    pass


class ShapeMismatch(GsaError):
    pass


class NonFiniteInput(GsaError):
    pass


class InvalidTiling(GsaError):
    pass


class InvalidStride(GsaError):
    pass


class EmptySelection(GsaError):
    """A selection plan row selects no key windows; softmax over the empty set is undefined."""


class ContextMismatch(GsaError):
    pass


class NonDeterministicForward(GsaError):
    pass


class DegenerateInput(GsaError):
    pass


class ConfigParseError(GsaError):
    pass
