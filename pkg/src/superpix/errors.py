"""Exception hierarchy shared by all modules."""


class SuperpixError(Exception):
    """Base class for every error raised by this package."""


class InputError(SuperpixError, ValueError):
    """Malformed or inconsistent input; maps to CLI exit code 2."""


class NumericalError(SuperpixError, ArithmeticError):
    """Numerical failure (non-finite loss etc.); maps to CLI exit code 3."""


# file formats
class MalformedHeader(InputError):
    pass


class UnsupportedDepth(InputError):
    pass


class TruncatedData(InputError):
    pass


class BadMagic(InputError):
    pass


class VersionMismatch(InputError):
    pass


class LabelOverflow(InputError):
    pass


class SpecMismatch(InputError):
    pass


# shapes and parameters
class WrongChannelCount(InputError):
    pass


class Downscale(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class DimMismatch(InputError):
    pass


class LengthMismatch(InputError):
    pass


class IndivisibleDims(InputError):
    pass


class StepTooLarge(InputError):
    pass


class BadDims(InputError):
    pass


class BadDepth(InputError):
    pass


class CountMismatch(InputError):
    pass


class EmptyList(InputError):
    pass


class OutOfBounds(InputError):
    pass


class EmptyDataset(InputError):
    pass


class NonFiniteLoss(NumericalError):
    pass
