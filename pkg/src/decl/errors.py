"""Exception types raised across the package."""


class DeclError(Exception):
    """Base class for package errors."""


class DegenerateInputError(DeclError, ValueError):
    """Input makes a quantity undefined (e.g. a zero-power SNR denominator)."""


class ShapeMismatchError(DeclError, ValueError):
    pass


class LabelError(DeclError, ValueError):
    pass


class StratificationError(DeclError, ValueError):
    """A stratified subsample cannot keep every class represented."""


class NonFiniteLossError(DeclError, RuntimeError):
    pass
