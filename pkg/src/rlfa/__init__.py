"""Desk-scale laboratory for reinforcement learning with function approximation."""

from ._validation import (
    BudgetExhaustedError,
    DivergenceError,
    InvalidInputError,
    NumericalFailure,
)
from .mdp import FiniteMDP, Policy, QFunction, evaluate_policy, solve_exact

__version__ = "0.1.0"

__all__ = [
    "BudgetExhaustedError",
    "DivergenceError",
    "FiniteMDP",
    "InvalidInputError",
    "NumericalFailure",
    "Policy",
    "QFunction",
    "evaluate_policy",
    "solve_exact",
    "__version__",
]
