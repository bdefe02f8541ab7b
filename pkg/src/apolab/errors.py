"""Exception types shared across the package."""


class InputDomainError(ValueError):
    """An argument falls outside the operation's domain."""


class NumericFailure(ArithmeticError):
    """A computation produced a non-finite value."""


class UndefinedRate(InputDomainError):
    """A rate was requested over zero passing solutions."""


class NoSeparation(InputDomainError):
    """All solution scores are equal, so best and worst cannot be told apart."""
