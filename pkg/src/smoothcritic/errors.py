"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input values fall outside the mathematical domain of an op."""


class ConfigError(ValueError):
    """A spec/config object failed validation."""


class ContractError(RuntimeError):
    """A documented precondition of an API was violated by the caller."""
