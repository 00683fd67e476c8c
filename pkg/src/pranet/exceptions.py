"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class DomainError(ValueError):
    """An argument lies outside the range an operation accepts."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class ConfigError(ValueError):
    """A configuration document is malformed or inconsistent."""
