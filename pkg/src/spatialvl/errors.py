"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1, NumericError -> 2,
OSError -> 3.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
