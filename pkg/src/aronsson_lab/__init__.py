"""Numerical laboratory for L-infinity variational problems in the plane.

Approximate absolute minimisers are built from the exponential
regularisation ``int exp(H(Du)/eps)`` on node grids; structural identities,
integral estimates and comparison with cones are checked on the results.
"""
from __future__ import annotations

from .cones import ConeFunction, comparison_with_cones, cone_value, lipschitz_characterization, mcshane_extend
from .diagnostics import EstimateReport, LinearFunction
from .errors import (AronssonLabError, DataIOError, DomainError, EnergyOverflowError, HypothesisViolation,
                     NumericalError, SingularHessianError, ValidationError)
from .grid import Grid2D, GridFunction, TestFunction
from .hamiltonian import Hamiltonian, lambda_profile, mollify, strongify, tau_profile, tau_tilde
from .identities import IdentityReport
from .solver import SolveConfig, SolveResult, eps_continuation, solve_exp_harmonic

__version__ = "0.1.0"

__all__ = [
    "AronssonLabError", "ConeFunction", "DataIOError", "DomainError", "EnergyOverflowError", "EstimateReport",
    "Grid2D", "GridFunction", "Hamiltonian", "HypothesisViolation", "IdentityReport", "LinearFunction",
    "NumericalError", "SingularHessianError", "SolveConfig", "SolveResult", "TestFunction", "ValidationError",
    "comparison_with_cones", "cone_value", "eps_continuation", "lambda_profile", "lipschitz_characterization",
    "mcshane_extend", "mollify", "solve_exp_harmonic", "strongify", "tau_profile", "tau_tilde",
]
