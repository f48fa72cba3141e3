class TextMotionError(Exception):
    """Base class for contract violations raised by this package."""


class ShapeError(TextMotionError, ValueError):
    pass


class NumericError(TextMotionError, ArithmeticError):
    pass


class ContractError(TextMotionError, ValueError):
    pass


class FormatError(TextMotionError, ValueError):
    """A binary or JSON file does not match its declared layout."""
