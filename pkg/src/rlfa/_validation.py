"""Exceptions and small input checks shared across modules."""

import numpy as np


class InvalidInputError(ValueError):
    """Input violates a documented precondition."""


class BudgetExhaustedError(RuntimeError):
    """A generative model refused a query because its budget is spent."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericalFailure(RuntimeError):
    """An iterative solver failed to converge or a factorization broke down."""


class DivergenceError(NumericalFailure):
    """Parameters of an iterative method blew up."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


def check_probability_vector(p, atol=1e-12, name="distribution"):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{name} has non-finite entries")
    if np.any(p < -atol):
        raise InvalidInputError(f"{name} has negative entries (min {p.min():.3g})")
    if abs(p.sum() - 1.0) > atol:
        raise InvalidInputError(f"{name} sums to {p.sum():.15g}, not 1")
    return p


def check_unit_rows(x, atol=1e-8, name="points"):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > atol)
    if bad.size:
        raise InvalidInputError(
            f"{name} must lie on the unit sphere; row {bad[0]} has norm {norms[bad[0]]:.12g}"
        )
    return x
