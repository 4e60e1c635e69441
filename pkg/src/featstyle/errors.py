"""Exception types shared across the package."""


class FeatStyleError(Exception):
    """Base class for all package errors."""


class DimensionError(FeatStyleError, ValueError):
    """Shapes are incompatible with the requested operation."""


class DomainError(FeatStyleError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ParameterError(FeatStyleError, ValueError):
    """A hyperparameter or configuration value is out of range."""


class ContractError(FeatStyleError, RuntimeError):
    """A precondition the caller is responsible for was violated."""


class NumericalError(FeatStyleError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""
