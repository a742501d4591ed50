"""Exception hierarchy shared by the library and the CLI."""


class StamError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(StamError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(StamError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(StamError, ValueError):
    """An experiment or task configuration is invalid."""


class NumericalError(StamError, ArithmeticError):
    """A non-finite value appeared during training."""


class GradientError(StamError):
    """Raised for missing gradients or an unreliable gradient check."""
