"""Exception types shared across the pipeline."""


class SPMError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class PreconditionError(SPMError, ValueError):
    """An input violates an operation's precondition."""

    exit_code = 3


class DegenerateError(SPMError, ArithmeticError):
    """The numerical problem is degenerate (rank deficient, zero light, ...)."""

    exit_code = 4


class ParseError(SPMError, ValueError):
    """A file could not be parsed."""

    exit_code = 2
