"""Exception hierarchy shared by every module.

Each family carries the process exit code used by the command line front end.
"""
from __future__ import annotations


class AronssonLabError(Exception):
    exit_code = 1


class ValidationError(AronssonLabError, ValueError):
    """Bad input: malformed configuration, inadmissible parameters."""

    exit_code = 2


class DomainError(ValidationError):
    """A point, region or table lookup falls outside where it is defined."""


class HypothesisViolation(ValidationError):
    """A Hamiltonian fails convexity, coercivity or normalisation checks."""


class NumericalError(AronssonLabError, ArithmeticError):
    exit_code = 3


class SingularHessianError(NumericalError):
    pass


class EnergyOverflowError(NumericalError):
    pass


class DataIOError(AronssonLabError, OSError):
    exit_code = 4


class ApproximateDerivativeWarning(UserWarning):
    """Derivatives obtained from finite differences rather than closed form."""
