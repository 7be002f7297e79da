"""Exception hierarchy shared by all modules.

Every error class carries an ``exit_code`` so the command-line front end can
map failures to process status without inspecting messages.
"""
from __future__ import annotations


class WahkitError(Exception):
    exit_code = 1


class ConfigurationError(WahkitError, ValueError):
    exit_code = 2


class DomainError(ConfigurationError):
    """Point or parameter outside the region where an operation is defined."""


class CatalogError(ConfigurationError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ValidationError(ConfigurationError):
    pass


class ShapeError(ConfigurationError):
    pass


class NumericalError(WahkitError, ArithmeticError):
    exit_code = 3


class LinearAlgebraError(NumericalError):
    pass


class CriticalPointError(NumericalError):
    pass


class ExtrapolationError(NumericalError):
    pass


class NumericalMultiplicityError(NumericalError):
    pass


class StabilityError(NumericalError):
    pass


class DiscretizationError(NumericalError):
    pass


class BarrierError(WahkitError):
    exit_code = 4


class ExpansionCapError(WahkitError):
    exit_code = 5


class AccuracyWarning(UserWarning):
    pass
