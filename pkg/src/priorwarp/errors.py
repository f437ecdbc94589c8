"""Exception types shared across the package.

Exit-code mapping lives in the CLI: FormatError -> 2, NumericError -> 3.
"""


class FormatError(ValueError):
    """A file or config payload violates its documented layout.

    Messages always name the offending field or byte region so a failing
    pipeline can be diagnosed from the one-line error alone.
    """


class NumericError(ArithmeticError):
    """A numeric invariant broke at runtime.

    Raised for non-finite losses or gradients, singular interpolation
    systems, and diverging fits. Messages name the first offending term.
    """


class GridError(ValueError):
    """A control-grid or system construction precondition failed."""
