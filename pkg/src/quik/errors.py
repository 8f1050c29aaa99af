"""Exception types shared across the package."""


class QuikError(Exception):
    """Base class for all errors raised by quik."""


class ShapeError(QuikError, ValueError):
    """Operand dimensions do not agree."""


class RangeError(QuikError, ValueError):
    """Integer value outside the representable range of the target format."""


class FormatError(QuikError):
    """Malformed or inconsistent on-disk data."""


class NumericalError(QuikError, ArithmeticError):
    """Numerical failure, e.g. a non positive-definite Hessian."""


class GraphError(QuikError, ValueError):
    """Malformed forward-model wiring."""
