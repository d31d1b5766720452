"""Exception hierarchy shared across the package."""


class MultikernelError(Exception):
    """Base class for all package errors."""


class ShapeError(MultikernelError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class ConfigError(MultikernelError, ValueError):
    """Invalid model, frame or experiment configuration."""


class NumericalError(MultikernelError, ArithmeticError):
    """Non-finite values or an ill-conditioned solve."""


class ZeroEnergyError(NumericalError):
    """A normalisation reference (target or input) has zero energy."""
