"""Reproducing kernels, kernel ridge regression, Mercer spectra, power functions.

Mercer objects live on finite supports: the integral operator against a
discrete probability measure ``rho`` is the weighted matrix
``D^{1/2} K D^{1/2}`` with ``D = diag(rho)``, so identities such as the
trace formula and the Mercer expansion hold exactly up to roundoff.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import InvalidInputError, check_probability_vector, check_unit_rows

KERNEL_KINDS = ("gaussian", "laplacian", "ntk", "random-feature")
PINV_RTOL = 1e-10
EIG_FLOOR = 1e-12


def relu(z):
    return np.maximum(z, 0.0)


def sphere_sample(n, d, rng):
    """``n`` points uniform on the unit sphere in R^d (normalized Gaussians)."""
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _arc_cosine(X, Y):
    """Zeroth and first order arc-cosine expectations for unit inputs.

    Returns ``(E[1{w.x>0} 1{w.y>0}], E[relu(w.x) relu(w.y)])`` for
    ``w ~ N(0, I)``. The angle comes from the chord length, which stays
    accurate near ``x = y`` where arccos loses half its digits.
    """
    u = np.clip(X @ Y.T, -1.0, 1.0)
    chord = cdist(X, Y, "euclidean")
    theta = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    k0 = (np.pi - theta) / (2 * np.pi)
    k1 = (np.sin(theta) + (np.pi - theta) * u) / (2 * np.pi)
    return u, k0, k1


@dataclass(frozen=True)
class Kernel:
    """Kernel descriptor.

    ``gaussian``: exp(-alpha ||x - y||^2); ``laplacian``: exp(-alpha ||x - y||);
    ``ntk``: two-layer ReLU tangent kernel with first-layer weights
    N(0, I/d); ``random-feature``: E relu(w.x) relu(w.y) with w uniform on
    the sphere. The last two need unit-norm inputs in R^d and use closed
    arc-cosine forms unless ``mc_samples`` asks for a Monte Carlo estimate.
    """

    kind: str
    alpha: float = 1.0
    d: int = None
    mc_samples: int = None
    mc_seed: int = 0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidInputError(f"unknown kernel kind {self.kind!r}")
        if self.kind in ("gaussian", "laplacian") and not self.alpha > 0:
            raise InvalidInputError("alpha must be positive")
        if self.kind in ("ntk", "random-feature") and (self.d is None or self.d < 1):
            raise InvalidInputError(f"{self.kind} kernel needs the input dimension d")

    def _prep(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.d is not None and X.shape[1] != self.d:
            raise InvalidInputError(f"expected inputs of dimension {self.d}, got {X.shape[1]}")
        if self.kind in ("ntk", "random-feature"):
            check_unit_rows(X)
        return X

    def gram(self, X, Y=None):
        """Kernel matrix ``k(X[i], Y[j])``."""
        X = self._prep(X)
        Y = X if Y is None else self._prep(Y)
        if X.shape[1] != Y.shape[1]:
            raise InvalidInputError("dimension mismatch between point sets")
        if self.kind == "gaussian":
            return np.exp(-self.alpha * cdist(X, Y, "sqeuclidean"))
        if self.kind == "laplacian":
            return np.exp(-self.alpha * cdist(X, Y, "euclidean"))
        if self.mc_samples:
            return self._monte_carlo_gram(X, Y)
        u, k0, k1 = _arc_cosine(X, Y)
        if self.kind == "ntk":
            # w ~ N(0, I/d) scales the relu product by 1/d; the indicator is scale-free
            return u * k0 + k1 / self.d
        # uniform-sphere directions: E|g|^2 = d for the Gaussian radial part
        return k1 / self.d

    def _monte_carlo_gram(self, X, Y):
        rng = np.random.default_rng(self.mc_seed)
        if self.kind == "ntk":
            W = rng.standard_normal((self.mc_samples, self.d)) / np.sqrt(self.d)
        else:
            W = sphere_sample(self.mc_samples, self.d, rng)
        zx, zy = X @ W.T, Y @ W.T
        out = relu(zx) @ relu(zy).T / self.mc_samples
        if self.kind == "ntk":
            out += (X @ Y.T) * ((zx > 0).astype(float) @ (zy > 0).T) / self.mc_samples
        return out

    def __call__(self, x, y):
        return float(self.gram(x, y)[0, 0])

    def diag(self, X):
        X = self._prep(X)
        if self.kind in ("gaussian", "laplacian"):
            return np.ones(X.shape[0])
        if self.mc_samples:
            return np.array([self._monte_carlo_gram(x[None], x[None])[0, 0] for x in X])
        k1 = np.full(X.shape[0], 0.5 / self.d)
        return k1 + 0.5 if self.kind == "ntk" else k1

    def to_dict(self):
        doc = {"kind": self.kind, "d": self.d}
        if self.kind in ("gaussian", "laplacian"):
            doc["alpha"] = self.alpha
        if self.mc_samples:
            doc["mc_samples"] = self.mc_samples
        return doc

    @classmethod
    def from_dict(cls, doc):
        extra = set(doc) - {"kind", "alpha", "d", "mc_samples", "mc_seed"}
        if extra:
            raise InvalidInputError(f"unknown kernel fields {sorted(extra)}")
        return cls(**doc)


def kernel_eval(k, x, y):
    return k(x, y)


def ntk_monte_carlo(x, y, n_samples, rng):
    """Monte Carlo NTK value and its standard error (oracle for tests)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    d = x.size
    W = rng.standard_normal((n_samples, d)) / np.sqrt(d)
    zx, zy = W @ x, W @ y
    terms = (x @ y) * ((zx > 0) & (zy > 0)) + relu(zx) * relu(zy)
    return terms.mean(), terms.std(ddof=1) / np.sqrt(n_samples)


@dataclass
class GramMatrix:
    """Kernel matrix on a point list with lazily cached decompositions."""

    points: np.ndarray
    matrix: np.ndarray
    _pinv: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, k, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        K = k.gram(points)
        return cls(points, 0.5 * (K + K.T))

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.matrix)[0]) if self.n else 0.0

    def check_psd(self):
        lo = self.min_eigenvalue
        if lo < -1e-8 * max(self.n, 1):
            raise InvalidInputError(f"Gram matrix is not PSD: min eigenvalue {lo:.3g}")
        return lo

    @property
    def pinv(self):
        if self._pinv is None:
            self._pinv = linalg.pinvh(self.matrix, rtol=PINV_RTOL)
        return self._pinv


def krr_fit(k, X, y, lam):
    """Coefficients ``(K + lam n I)^{-1} y`` of the kernel ridge estimator."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    if y.shape[0] != n:
        raise InvalidInputError("X and y have different numbers of rows")
    if lam < 0:
        raise InvalidInputError("lam must be nonnegative")
    K = k.gram(X)
    if lam == 0:
        cond = np.linalg.cond(K)
        if not np.isfinite(cond) or cond > 1e12:
            raise InvalidInputError(f"Gram matrix is singular at lam=0 (condition ~{cond:.3g})")
        return np.linalg.solve(K, y)
    return linalg.cho_solve(linalg.cho_factor(K + lam * n * np.eye(n)), y)


class KernelRidgeRegression(RegressorMixin, BaseEstimator):
    """Kernel ridge regression ``min (1/n) sum (y_i - f(x_i))^2 + lam ||f||_H^2``.

    Parameters
    ----------
    kernel : Kernel
    lam : float, default=1e-3
        Regularization; 0 gives the interpolant when the Gram matrix is
        invertible.

    Attributes
    ----------
    dual_coef_ : ndarray of shape (n_samples,)
    X_fit_ : ndarray of shape (n_samples, n_features)
    """

    def __init__(self, kernel=None, lam=1e-3):
        self.kernel = kernel
        self.lam = lam

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.X_fit_ = X
        self.dual_coef_ = krr_fit(self.kernel, X, y, self.lam)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return self.kernel.gram(X, self.X_fit_) @ self.dual_coef_

    def rkhs_norm(self):
        check_is_fitted(self)
        a = self.dual_coef_
        return float(np.sqrt(max(a @ self.kernel.gram(self.X_fit_) @ a, 0.0)))


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Mercer eigensystem of a kernel against a discrete measure.

    ``eigenfunctions[:, i]`` holds psi_i on ``support``; eigenvalues are
    nonincreasing.
    """

    support: np.ndarray
    weights: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    gram: np.ndarray

    @property
    def trace(self):
        return float(self.weights @ np.diag(self.gram))

    def reconstruct(self):
        psi = self.eigenfunctions
        return (psi * self.eigenvalues) @ psi.T

    def coefficients(self, g):
        """L2(rho) inner products <g, psi_i>."""
        return self.eigenfunctions.T @ (self.weights * np.asarray(g, dtype=float))


def spectrum_from_gram(K, rho, support=None):
    """Eigensystem of the operator with matrix ``K`` on atoms weighted by ``rho``.

    Atoms with zero weight are dropped: L2(rho) does not see them.
    """
    K = np.asarray(K, dtype=float)
    rho = check_probability_vector(rho, atol=1e-10, name="rho")
    if K.shape != (rho.size, rho.size):
        raise InvalidInputError("Gram matrix and weights disagree in size")
    keep = rho > 0
    K, rho = K[np.ix_(keep, keep)], rho[keep]
    if support is not None:
        support = np.asarray(support)[keep]
    root = np.sqrt(rho)
    vals, vecs = np.linalg.eigh(root[:, None] * K * root[None, :])
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    return Spectrum(support, rho, vals, vecs / root[:, None], K)


def mercer_spectrum(k, support, rho):
    support = np.atleast_2d(np.asarray(support, dtype=float))
    return spectrum_from_gram(GramMatrix.build(k, support).matrix, rho, support)


def rkhs_norm(spec, g):
    """sqrt(sum_i <g, psi_i>^2 / lambda_i); +inf if g leaves the numerical range."""
    g = np.asarray(g, dtype=float)
    if g.shape != spec.weights.shape:
        raise InvalidInputError("g must be given on the spectrum's support")
    c = spec.coefficients(g)
    lam = spec.eigenvalues
    live = lam > EIG_FLOOR
    dead = ~live & (np.abs(c) > 1e-9)
    if np.any(dead):
        i = int(np.flatnonzero(dead)[0])
        warnings.warn(
            f"component {i} (coefficient {c[i]:.3g}) lies on eigenvalue {lam[i]:.3g} <= "
            f"{EIG_FLOOR}; RKHS norm reported as +inf",
            RuntimeWarning,
            stacklevel=2,
        )
        return float("inf")
    return float(np.sqrt(np.sum(c[live] ** 2 / lam[live])))


def tail_sum(spec, n):
    """sum_{i > n} lambda_i."""
    if n < 0:
        raise InvalidInputError("n must be nonnegative")
    return float(spec.eigenvalues[n:].sum())


def power_function(k, centers, x):
    """sqrt(k(x, x) - k_x^T K_n^+ k_x) for each row of ``x``.

    This is both the interpolation residual ``inf_c ||k(x,.) - sum c_i k(x_i,.)||``
    and the largest value at ``x`` of a unit-norm function vanishing at the
    centers.
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    diag = k.diag(X)
    centers = np.asarray(centers, dtype=float)
    if centers.size == 0:
        p2 = diag
    else:
        centers = np.atleast_2d(centers)
        G = GramMatrix.build(k, centers)
        KX = k.gram(X, centers)
        p2 = diag - np.einsum("ij,jk,ik->i", KX, G.pinv, KX)
    # residuals at roundoff level relative to k(x, x) are exact zeros
    p2 = np.where(p2 <= 1e-12 * diag, 0.0, p2)
    out = np.sqrt(p2)
    return out if np.ndim(x) > 1 else out[0]


def center_basis(k, centers, x, tol=1e-10):
    """Values at ``x`` of the Gram-Schmidt orthonormalization of k(x_i, .) in H.

    Classical sequential Gram-Schmidt in coefficient space; centers whose
    section is (numerically) dependent on earlier ones are skipped.
    Returns an array of shape (len(x), r).
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    K = GramMatrix.build(k, centers).matrix
    n = K.shape[0]
    C = np.zeros((0, n))  # phi_j = sum_i C[j, i] k(x_i, .)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        for _ in range(2):  # reorthogonalize once for stability
            proj = C @ K @ e
            e = e - proj @ C
        norm2 = e @ K @ e
        if norm2 <= tol * max(K[i, i], 1e-300):
            continue
        C = np.vstack([C, e / np.sqrt(norm2)])
    return k.gram(np.atleast_2d(x), centers) @ C.T


def random_features(X, directions, width=None):
    """relu(X w_i) / m for each direction w_i (mean-field scaling)."""
    m = directions.shape[0] if width is None else width
    return relu(np.asarray(X) @ directions.T) / m


class RandomFeatureRegressor(RegressorMixin, BaseEstimator):
    """Two-layer ReLU model ``(1/m) sum_i a_i relu(w_i . x)`` with fixed w_i.

    Inner directions are drawn uniformly on the sphere; outer coefficients
    are fitted by ridge regression ``min (1/n)||y - F a||^2 + lam ||a||^2``
    (``lam = 0`` gives the minimum-norm least-squares fit).

    Parameters
    ----------
    n_features : int
        Width ``m``.
    lam : float, default=0.0
    random_state : int or None
    directions : ndarray of shape (m, d), optional
        Use these inner weights instead of sampling.
    """

    def __init__(self, n_features=64, lam=0.0, random_state=None, directions=None):
        self.n_features = n_features
        self.lam = lam
        self.random_state = random_state
        self.directions = directions

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if self.directions is not None:
            W = np.asarray(self.directions, dtype=float)
        else:
            if not self.n_features or self.n_features < 1:
                raise InvalidInputError("n_features must be a positive integer")
            W = sphere_sample(self.n_features, X.shape[1], np.random.default_rng(self.random_state))
        F = random_features(X, W)
        n, m = F.shape
        if self.lam > 0:
            self.coef_ = linalg.solve(F.T @ F + n * self.lam * np.eye(m), F.T @ y, assume_a="pos")
        else:
            self.coef_ = np.linalg.lstsq(F, y, rcond=None)[0]
        self.directions_ = W
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        return random_features(check_array(X), self.directions_) @ self.coef_


def random_feature_regress(X, y, m, lam, rng, directions=None):
    """Fit a width-``m`` random-feature model; returns the fitted regressor."""
    if m is None or m < 1:
        raise InvalidInputError("feature count m must be positive")
    X = check_unit_rows(X, name="inputs")
    seed = int(rng.integers(2**63))
    return RandomFeatureRegressor(m, lam, random_state=seed, directions=directions).fit(X, y)


def barron_target(n_atoms, d, rng):
    """f(x) = (1/J) sum_j a_j relu(w_j . x), a_j = +-1, w_j on the sphere.

    Barron norm at most 1.
    """
    W = sphere_sample(n_atoms, d, rng)
    a = rng.choice([-1.0, 1.0], size=n_atoms)

    def f(X):
        return relu(np.atleast_2d(X) @ W.T) @ a / n_atoms

    return f


def rkhs_unit_target(k, centers, rng, nonnegative=False):
    """Random kernel expansion sum c_j k(z_j, .) scaled to RKHS norm 1."""
    centers = np.atleast_2d(centers)
    c = rng.standard_normal(centers.shape[0])
    if nonnegative:
        c = np.abs(c)
    c /= np.sqrt(c @ k.gram(centers) @ c)

    def f(X):
        return k.gram(np.atleast_2d(X), centers) @ c

    return f


def minimal_ucb(k, centers, values, x):
    """Smallest pointwise upper bound over unit-ball functions with given values.

    ``sup{g(x): ||g||_H <= 1, g(x_i) = values_i}`` equals the minimum-norm
    interpolant plus ``sqrt(1 - ||interpolant||^2)`` times the power function.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    values = np.asarray(values, dtype=float)
    G = GramMatrix.build(k, centers)
    coef = G.pinv @ values
    slack = max(1.0 - float(values @ coef), 0.0)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    return k.gram(X, centers) @ coef + np.sqrt(slack) * power_function(k, centers, X)
