"""Exception types shared across the package.

The CLI maps ``NumericError`` to exit code 2 and every other
``JpmapError`` to exit code 1.
"""


class JpmapError(Exception):
    """Base class for all errors raised by jpmap."""


class ParameterError(JpmapError, ValueError):
    """An argument is outside its documented domain."""


class ShapeError(JpmapError, ValueError):
    """Array dimensions do not match."""


class FormatError(JpmapError, ValueError):
    """A file or byte stream is malformed."""


class NumericError(JpmapError, ArithmeticError):
    """A computation diverged, produced non-finite values, or failed to converge."""
