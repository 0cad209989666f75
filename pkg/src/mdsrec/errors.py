"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2, data problems
exit 3, numeric problems exit 4.
"""


class MDSRecError(Exception):
    """Base class for all package errors."""


class ShapeError(MDSRecError, ValueError):
    pass


class DataError(MDSRecError, ValueError):
    """Malformed or inconsistent input data."""


class NumericError(MDSRecError, ArithmeticError):
    """NaN/Inf, divergence, or a failed gradient check."""


class NonDeterministicError(NumericError):
    pass


class GraphError(MDSRecError, RuntimeError):
    """Backward requested on a tensor that is not part of a recorded graph."""


class MaskError(MDSRecError, ValueError):
    """A softmax row with every entry forbidden."""
