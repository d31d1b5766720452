"""Multikernel neural networks for multiplant nonlinear system identification."""

from .errors import ConfigError, MultikernelError, NumericalError, ShapeError, ZeroEnergyError

__version__ = "0.1.0"

__all__ = ["ConfigError", "MultikernelError", "NumericalError", "ShapeError", "ZeroEnergyError", "__version__"]
