"""Numerical laboratory for degenerate fully nonlinear elliptic homogenization."""

__version__ = "0.1.0"

from .environment import (CheckerboardParams, ConstantParams, EllipticityField, TrapFieldParams,
                          estimate_moment, sample_field)
from .operators import LinearRule, OperatorSpec, eval_F, pucci
from .discretization import DiscreteOperator, FrameSet, GridDomain, GridFunction
from .solver import SolveConfig, convex_envelope, solve_dirichlet, solve_obstacle
from .homogenization import EffectiveOperator, contact_density, estimate_fbar

__all__ = [
    "__version__",
    "CheckerboardParams",
    "ConstantParams",
    "EllipticityField",
    "TrapFieldParams",
    "estimate_moment",
    "sample_field",
    "LinearRule",
    "OperatorSpec",
    "eval_F",
    "pucci",
    "DiscreteOperator",
    "FrameSet",
    "GridDomain",
    "GridFunction",
    "SolveConfig",
    "convex_envelope",
    "solve_dirichlet",
    "solve_obstacle",
    "EffectiveOperator",
    "contact_density",
    "estimate_fbar",
]
