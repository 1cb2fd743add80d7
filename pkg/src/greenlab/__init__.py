"""Lattice Green functions of divergence-form elliptic operators and their decay estimates."""

from .coeff import CoefficientField, EnsembleSpec, identity_field, sample_two_phase, scalar_two_phase
from .config import ConfigError, ExperimentConfig, validate
from .green import GreenBundle, GreenSolver, SolverFailure, green_bundle
from .lattice import DomainError, LatticeDomain, build_domain
from .operator import DivFormOperator, assemble_div_form
from .solver import SolverConfig, cg_solve, dense_oracle_solve

__version__ = "0.1.0"

__all__ = [
    "CoefficientField", "ConfigError", "DivFormOperator", "DomainError", "EnsembleSpec", "ExperimentConfig",
    "GreenBundle", "GreenSolver", "LatticeDomain", "SolverConfig", "SolverFailure", "assemble_div_form",
    "build_domain", "cg_solve", "dense_oracle_solve", "green_bundle", "identity_field", "sample_two_phase",
    "scalar_two_phase", "validate",
]
