"""Linear MDPs: feature maps, construction, ridge regression and UCB bonus."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import InvalidInputError
from .mdp import FiniteMDP, apply_bellman

FEATURE_KINDS = ("tabular-onehot", "custom-grid")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature map on a finite grid: ``values[s, a]`` is phi(s, a) in R^d."""

    values: np.ndarray
    kind: str = "custom-grid"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3:
            raise InvalidInputError(f"feature table must have shape (S, A, d), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("features must be finite")
        if self.kind not in FEATURE_KINDS:
            raise InvalidInputError(f"unknown feature kind {self.kind!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.shape[2]

    @property
    def grid_shape(self):
        return self.values.shape[:2]

    @property
    def norm_bound(self):
        return float(np.linalg.norm(self.values, axis=2).max())

    @property
    def matrix(self):
        """Features stacked as an (S*A, d) design; row index is s*A + a."""
        S, A, d = self.values.shape
        return self.values.reshape(S * A, d)

    def __call__(self, s, a):
        return self.values[s, a]

    @classmethod
    def tabular(cls, n_states, n_actions):
        eye = np.eye(n_states * n_actions).reshape(n_states, n_actions, -1)
        return cls(eye, kind="tabular-onehot")

    def to_dict(self):
        doc = {"kind": self.kind, "d": self.dim}
        if self.kind == "tabular-onehot":
            doc["S"], doc["A"] = self.grid_shape
        else:
            doc["values"] = self.values.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc):
        kind = doc.get("kind")
        if kind == "tabular-onehot":
            fm = cls.tabular(int(doc["S"]), int(doc["A"]))
        elif kind == "custom-grid":
            fm = cls(np.asarray(doc["values"], dtype=float))
        else:
            raise InvalidInputError(f"unknown feature kind {kind!r}")
        if fm.dim != int(doc["d"]):
            raise InvalidInputError(f"declared d={doc['d']} but features have d={fm.dim}")
        return fm


@dataclass(frozen=True, eq=False)
class LinearMDPSpec:
    """Reward weights ``theta[h]`` (d,) and measure weights ``measures[h]`` (d, S).

    Row ``i`` of ``measures[h]`` is the i-th signed measure on the next
    state; only the combinations ``phi(s, a) @ measures[h]`` need be
    probability vectors.
    """

    features: FeatureMap
    theta: np.ndarray
    measures: np.ndarray
    initial: np.ndarray = None

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        M = np.asarray(self.measures, dtype=float)
        d = self.features.dim
        if th.ndim != 2 or th.shape[1] != d:
            raise InvalidInputError(f"theta must have shape (H, {d}), got {th.shape}")
        if M.ndim != 3 or M.shape[:2] != (th.shape[0], d):
            raise InvalidInputError(f"measures must have shape (H, {d}, S), got {M.shape}")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "measures", M)

    @property
    def horizon(self):
        return self.theta.shape[0]

    def induced_transition(self):
        return np.einsum("sad,hdt->hsat", self.features.values, self.measures)

    def induced_reward(self):
        return np.einsum("sad,hd->hsa", self.features.values, self.theta)


def build_linear_mdp(spec, states=None, actions=None, initial=None):
    """Assemble the finite MDP with P = phi^T M_h and r = phi^T theta_h."""
    P = spec.induced_transition()
    r = spec.induced_reward()
    H, S, A, S2 = P.shape
    if S2 != S:
        raise InvalidInputError(f"measures cover {S2} next states but features cover {S}")
    low = np.argwhere(P < -1e-12)
    if low.size:
        h, s, a, _ = low[0]
        raise InvalidInputError(f"induced row (h={h}, s={s}, a={a}) has a negative entry")
    sums = P.sum(axis=3)
    err = np.abs(sums - 1.0)
    if np.any(err > 1e-10):
        h, s, a = np.unravel_index(np.argmax(err), err.shape)
        raise InvalidInputError(f"induced row (h={h}, s={s}, a={a}) sums to {sums[h, s, a]:.12g}")
    bad = np.argwhere((r < 0) | (r > 1))
    if bad.size:
        h, s, a = bad[0]
        raise InvalidInputError(f"induced reward (h={h}, s={s}, a={a}) = {r[h, s, a]:.6g}")
    if np.any(P < 0) or np.any(err > 1e-12):
        P = np.clip(P, 0.0, None)
        P /= P.sum(axis=3, keepdims=True)
    if initial is None:
        initial = spec.initial if spec.initial is not None else np.full(S, 1.0 / S)
    return FiniteMDP(P, r, initial, states, actions)


def tabular_embedding(mdp):
    """Canonical one-hot linear representation of a tabular MDP."""
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    fm = FeatureMap.tabular(S, A)
    theta = mdp.reward.reshape(H, S * A)
    measures = mdp.transition.reshape(H, S * A, S)
    return LinearMDPSpec(fm, theta, measures, initial=mdp.initial)


def random_linear_spec(n_states, n_actions, horizon, d, rng):
    """Linear MDP with features and measure rows on the probability simplex.

    Convex combinations of distributions are distributions, so every
    induced row is valid by construction.
    """
    phi = rng.dirichlet(np.full(d, 0.5), size=(n_states, n_actions))
    phi /= phi.sum(axis=2, keepdims=True)
    measures = rng.dirichlet(np.ones(n_states), size=(horizon, d))
    measures /= measures.sum(axis=2, keepdims=True)
    theta = rng.uniform(size=(horizon, d))
    return LinearMDPSpec(FeatureMap(phi), theta, measures)


@dataclass
class RidgeDesign:
    """Ridge problem ``min (1/n) sum (y_i - x_i.w)^2 + lam ||w||^2``.

    ``n_reg`` is the count multiplying ``lam`` in the normal matrix
    ``X^T X + n_reg * lam * I``; it defaults to the number of rows.
    """

    X: np.ndarray
    y: np.ndarray
    lam: float = 1.0
    n_reg: float = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise InvalidInputError("X and y have different numbers of rows")
        if self.lam < 0:
            raise InvalidInputError("lam must be nonnegative")

    @property
    def n(self):
        return self.X.shape[0] if self.n_reg is None else self.n_reg

    @property
    def gram(self):
        d = self.X.shape[1]
        return self.X.T @ self.X + self.n * self.lam * np.eye(d)


def _cho(matrix, what):
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError:
        raise InvalidInputError(f"{what} is not positive definite") from None


def ridge_fit(design):
    """Solve the ridge normal equations by Cholesky factorization."""
    d = design.X.shape[1]
    if design.X.shape[0] == 0:
        return np.zeros(d)
    what = "X^T X (lam = 0)" if design.lam == 0 else "ridge normal matrix"
    factor = _cho(design.gram, what)
    return linalg.cho_solve(factor, design.X.T @ design.y)


def ridge_gradient(design, w):
    n = design.X.shape[0]
    resid = design.y - design.X @ w
    return -2.0 / n * design.X.T @ resid + 2.0 * design.lam * (design.n / n) * w


def ucb_bonus(phi, lambda_matrix, beta):
    """beta * sqrt(phi^T Lambda^{-1} phi); ``phi`` may be a stack of rows."""
    factor = _cho(np.asarray(lambda_matrix, dtype=float), "Lambda")
    phi = np.asarray(phi, dtype=float)
    z = linalg.solve_triangular(factor[0], phi.T, lower=True)
    return beta * np.sqrt(np.sum(z * z, axis=0)) if phi.ndim > 1 else beta * float(np.linalg.norm(z))


class ClosureReport(NamedTuple):
    max_residual: float
    constant: float
    residuals: np.ndarray


def least_squares_residual(target, features):
    """Max-abs residual of the least-squares fit of ``target`` (S, A) by ``features``."""
    Phi = features.matrix if isinstance(features, FeatureMap) else features
    w, *_ = np.linalg.lstsq(Phi, np.ravel(target), rcond=None)
    return float(np.abs(Phi @ w - np.ravel(target)).max()), w


def check_linear_closure(mdp, phi, trials, rng, include_zero=True):
    """Numerical test that T_h f stays in span(phi) for bounded f.

    Draws ``trials`` functions f with entries in [-1, 1] (plus f = 0), fits
    T_h f by least squares in the features for every step and reports the
    worst residual and the largest ``||omega|| / (||f||_inf + 1)``. A small
    residual is evidence of closure; a large one refutes it.
    """
    if phi.grid_shape != (mdp.n_states, mdp.n_actions):
        raise InvalidInputError("feature grid does not match the MDP")
    fs = [rng.uniform(-1, 1, size=mdp.n_states) for _ in range(trials)]
    if include_zero:
        fs.insert(0, np.zeros(mdp.n_states))
    residuals = np.empty((len(fs), mdp.horizon))
    const = 0.0
    for i, f in enumerate(fs):
        for h in range(mdp.horizon):
            res, w = least_squares_residual(apply_bellman(mdp, h, f), phi)
            residuals[i, h] = res
            const = max(const, float(np.linalg.norm(w)) / (np.abs(f).max() + 1.0))
    return ClosureReport(float(residuals.max()), const, residuals)


class LinearRidge(RegressorMixin, BaseEstimator):
    """Ridge regression ``min (1/n) ||y - Xw||^2 + lam ||w||^2``.

    Parameters
    ----------
    lam : float, default=1.0
        Regularization strength; 0 requires a full-column-rank design.
    n_reg : float, optional
        Count multiplying ``lam`` in the normal matrix; defaults to the
        number of training rows.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    gram_ : ndarray of shape (n_features, n_features)
        The regularized normal matrix, reusable for confidence bonuses.
    """

    def __init__(self, lam=1.0, n_reg=None):
        self.lam = lam
        self.n_reg = n_reg

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        design = RidgeDesign(X, y, self.lam, self.n_reg)
        self.coef_ = ridge_fit(design)
        self.gram_ = design.gram
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return X @ self.coef_
