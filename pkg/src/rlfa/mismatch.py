"""Distribution mismatch: Pi-norms, perturbation responses, reachable sets.

Functions live on a finite support of state-action points. An RKHS
function is seen only through its values ``g`` there; the smallest RKHS
norm with those values is ``sqrt(g^T K^+ g)``, so every supremum over the
RKHS unit ball becomes a finite-dimensional problem.
"""

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import optimize, special

from ._validation import InvalidInputError, NumericalFailure, check_probability_vector
from .io import write_schema_csv
from .kernels import EIG_FLOOR, Kernel, Spectrum, sphere_sample
from .mdp import Policy, enumerate_deterministic_policies, greedy_policy, occupancy

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class DistributionSet:
    """Probability vectors over a common finite support.

    ``members[j]`` is a distribution over ``support``; ``steps[j]`` records
    the step it belongs to when the set is a union of per-step sets.
    """

    support: np.ndarray
    members: np.ndarray
    steps: np.ndarray = None

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.members, dtype=float))
        if M.shape[0] == 0 or M.size == 0:
            raise InvalidInputError("distribution set is empty")
        if np.any(M < -1e-12) or np.any(np.abs(M.sum(axis=1) - 1.0) > 1e-10):
            raise InvalidInputError("every member must be a probability vector")
        if len(self.support) != M.shape[1]:
            raise InvalidInputError("members and support disagree in size")
        object.__setattr__(self, "members", M)
        steps = np.zeros(M.shape[0], dtype=int) if self.steps is None else np.asarray(self.steps, int)
        object.__setattr__(self, "steps", steps)

    def __len__(self):
        return self.members.shape[0]

    def at_step(self, h):
        keep = self.steps == h
        return DistributionSet(self.support, self.members[keep], self.steps[keep])

    def union(self, other):
        return DistributionSet(self.support, np.vstack([self.members, other.members]),
                               np.concatenate([self.steps, other.steps]))


def pi_norm(g, Pi):
    """``max_{rho in Pi} |<g, rho>|``."""
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("g must be finite on the support")
    return float(np.abs(Pi.members @ g).max())


@dataclass(frozen=True, eq=False)
class PerturbationInstance:
    """Unit RKHS ball intersected with an L2(nu) ball of radius ``epsilon``.

    Parameters
    ----------
    gram : ndarray (m, m) or Spectrum
        Kernel matrix on the support (a Spectrum contributes its ``gram``).
    nu : ndarray (m,)
    epsilon : float
    Pi : DistributionSet
    """

    gram: np.ndarray
    nu: np.ndarray
    epsilon: float
    Pi: DistributionSet

    def __post_init__(self):
        K = self.gram.gram if isinstance(self.gram, Spectrum) else self.gram
        K = np.asarray(K, dtype=float)
        m = len(self.Pi.support)
        if K.shape != (m, m):
            raise InvalidInputError(f"Gram matrix must be {m} x {m}, got {K.shape}")
        object.__setattr__(self, "gram", 0.5 * (K + K.T))
        object.__setattr__(self, "nu", check_probability_vector(self.nu, atol=1e-10, name="nu"))
        if self.nu.size != m:
            raise InvalidInputError("nu does not match the support")
        if not self.epsilon >= 0:
            raise InvalidInputError("epsilon must be nonnegative")

    @classmethod
    def from_kernel(cls, k, nu, epsilon, Pi):
        return cls(k.gram(Pi.support), nu, epsilon, Pi)

    def with_epsilon(self, epsilon):
        return PerturbationInstance(self.gram, self.nu, epsilon, self.Pi)


class Response(NamedTuple):
    value: float
    witness: np.ndarray
    per_rho: np.ndarray
    dual_gap: float
    rho_index: int


def _root(K):
    """Symmetric square root of the PSD part of ``K`` (eigenvalues <= floor dropped)."""
    evals, V = np.linalg.eigh(K)
    live = evals > EIG_FLOOR * max(evals.max(), 1.0)
    return (V[:, live] * np.sqrt(evals[live])) @ V[:, live].T


def _ellipsoid_max(c, B, eps, tol=1e-8, max_iter=200):
    """max c.u s.t. ||u|| <= 1 and u^T B u <= eps^2.

    Upper bound for every t in [0, 1]:
    ``h(t) = sqrt((1 - t + t eps^2) c^T ((1 - t) I + t B)^{-1} c)``.
    h is quasiconvex in t (its sublevel sets come from a jointly convex
    Lagrangian dual along rays), so a grid bracket plus golden-section
    search finds its minimum. The witness ``M_t^{-1} c`` is scaled onto the
    feasible set; the duality gap is what remains.

    Returns ``(value, u, gap)``.
    """
    if not np.any(c):
        return 0.0, np.zeros_like(c), 0.0
    gam, W = np.linalg.eigh(B)
    gam = np.clip(gam, 0.0, None)
    z2 = (W.T @ c) ** 2

    def h(t):
        denom = (1.0 - t) + t * gam
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(z2 > 0, z2 / denom, 0.0)
        return math.sqrt(max((1.0 - t + t * eps * eps) * float(terms.sum()), 0.0))

    def witness(t):
        denom = (1.0 - t) + t * gam
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(denom > 0, (W.T @ c) / denom, 0.0)
        u = W @ coef
        nu2 = float(u @ u)
        nb = float(u @ B @ u)
        if nu2 == 0:
            return np.zeros_like(u)
        scale = 1.0 / math.sqrt(nu2)
        if nb > 0:
            scale = min(scale, eps / math.sqrt(nb))
        return scale * u

    grid = np.linspace(0.0, 1.0, 65)
    vals = np.array([h(t) for t in grid])
    j = int(np.argmin(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, 64)]
    a = hi - GOLDEN * (hi - lo)
    b = lo + GOLDEN * (hi - lo)
    fa, fb = h(a), h(b)
    it = 0
    while hi - lo > tol and it < max_iter:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - GOLDEN * (hi - lo)
            fa = h(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + GOLDEN * (hi - lo)
            fb = h(b)
        it += 1
    cands = [(vals[j], grid[j]), (fa, a), (fb, b)]
    best_val, best_t = min(cands)
    # the best primal point may come from a nearby multiplier
    u = max((witness(t) for t in (best_t, a, b, lo, hi)), key=lambda v: float(c @ v))
    primal = float(c @ u)
    gap = best_val - primal
    if hi - lo > tol or gap > 1e-6 * max(best_val, 1.0):
        raise NumericalFailure(
            f"dual search did not converge after {it} iterations (duality gap {gap:.3g})"
        )
    return primal, u, max(gap, 0.0)


def perturbation_response(inst, tol=1e-8, max_iter=200):
    """``max_{rho in Pi} sup{<g, rho>: ||g||_H <= 1, ||g||_{L2(nu)} <= epsilon}``.

    Functions are parametrized as ``g = K^{1/2} u`` with ``||u|| <= 1``, which
    covers exactly the RKHS unit ball restricted to the support.

    Returns
    -------
    Response
        ``value``, the witness ``g`` on the support for the maximizing
        ``rho``, the per-rho values, the worst duality gap and the index of
        the maximizing ``rho``.

    Raises
    ------
    NumericalFailure
        When the dual search does not close its gap within ``max_iter``.
    """
    root = _root(inst.gram)
    B = root @ (inst.nu[:, None] * root)
    per, gaps, witnesses = [], [], []
    for rho in inst.Pi.members:
        c = root @ rho
        v, u, gap = _ellipsoid_max(c, B, inst.epsilon, tol, max_iter)
        per.append(v)
        gaps.append(gap)
        witnesses.append(root @ u)
    per = np.array(per)
    j = int(np.argmax(per))
    return Response(float(per[j]), witnesses[j], per, float(max(gaps)), j)


def rkhs_dual_norm(gram, rho):
    """``sup_{||g||_H <= 1} <g, rho> = sqrt(rho^T K rho)``."""
    return float(np.sqrt(max(rho @ gram @ rho, 0.0)))


def default_candidates(Pi):
    """Uniform, every member of ``Pi`` and every pairwise midpoint."""
    m = Pi.members.shape[1]
    cands = [np.full(m, 1.0 / m)] + list(Pi.members)
    for i, j in itertools.combinations(range(len(Pi)), 2):
        cands.append(0.5 * (Pi.members[i] + Pi.members[j]))
    return cands


class DeltaResult(NamedTuple):
    value: float
    nu: np.ndarray
    index: int
    responses: np.ndarray


def delta_complexity(gram, Pi, epsilon, candidate_nus=None, refine=True, max_evals=None):
    """Candidate-search upper bound on ``inf_nu R(Pi, H, epsilon, nu)``.

    The infimum over all of P(S x A) is replaced by a minimum over
    ``candidate_nus`` (default :func:`default_candidates`). With ``refine``
    the best candidate is then polished by Nelder-Mead on softmax logits,
    which only ever lowers the value. Either way the result is an upper
    bound on the true infimum; ``index`` is -1 when refinement won.
    """
    K = gram.gram if isinstance(gram, Spectrum) else gram
    cands = default_candidates(Pi) if candidate_nus is None else list(candidate_nus)
    if not cands:
        raise InvalidInputError("candidate list is empty")

    def response(nu):
        return perturbation_response(PerturbationInstance(K, nu, epsilon, Pi)).value

    vals = np.array([response(nu) for nu in cands])
    j = int(np.argmin(vals))
    best, best_nu = float(vals[j]), np.asarray(cands[j], dtype=float)
    if refine and best > 0:
        m = best_nu.size
        res = optimize.minimize(
            lambda z: response(special.softmax(z)),
            np.log(best_nu + 1e-6),
            method="Nelder-Mead",
            options={"maxfev": max_evals or 100 * m, "xatol": 1e-6, "fatol": 1e-10},
        )
        if res.fun < best:
            best, best_nu, j = float(res.fun), special.softmax(res.x), -1
    return DeltaResult(best, best_nu, j, vals)


def write_response_csv(path, rows, seed=None):
    """Rows of ``(epsilon, nu_id, rho_id, response, dual_gap)``."""
    return write_schema_csv(path, "response", rows, seed=seed)


def _pairs_support(S, A):
    return np.array([(s, a) for s in range(S) for a in range(A)])


def _dedupe(members, steps):
    seen, keep = set(), []
    for i, (m, h) in enumerate(zip(members, steps)):
        key = (int(h), tuple(np.round(m, 12)))
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return members[keep], steps[keep]


def _occupancy_rows(mdp, pi):
    return [o.probs.ravel() for o in occupancy(mdp, pi)]


def reachable_set(mdp, mode="enumerate", m=100, rng=None, limit=10**5):
    """Reachable state-action distributions, labelled by step.

    ``enumerate``: occupancies of every deterministic policy (the extreme
    points of each per-step set). ``sample``: occupancies of ``m`` random
    stochastic policies plus greedy policies for ``m`` random rewards.
    Duplicates (to 12 decimals) are removed per step.
    """
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    rows, steps = [], []
    if mode == "enumerate":
        count = A ** (H * S)
        if count > limit:
            raise InvalidInputError(f"{count} deterministic policies exceeds the limit {limit}")
        policies = enumerate_deterministic_policies(mdp, limit)
    elif mode == "sample":
        if rng is None:
            raise InvalidInputError("sample mode needs an rng")
        policies = [Policy(rng.dirichlet(np.ones(A), size=(H, S))) for _ in range(m)]
        policies += [greedy_policy(rng.uniform(size=(H, S, A))) for _ in range(m)]
    else:
        raise InvalidInputError(f"unknown mode {mode!r}")
    for pi in policies:
        for h, row in enumerate(_occupancy_rows(mdp, pi)):
            rows.append(row)
            steps.append(h)
    members, steps = _dedupe(np.array(rows), np.array(steps))
    order = np.argsort(steps, kind="stable")
    return DistributionSet(_pairs_support(S, A), members[order], steps[order])


def concentration_coefficient(nu, Pi):
    """``max_{h, rho in Pi_h} sqrt(sum_x rho(x)^2 / nu_h(x))``.

    ``nu`` is one distribution shared by all steps or an (H, m) array
    indexed by ``Pi.steps``. Returns ``inf`` (with a warning naming the
    atom) when some ``rho`` charges an atom that ``nu_h`` misses.
    """
    nu = np.asarray(nu, dtype=float)
    worst = 0.0
    for rho, h in zip(Pi.members, Pi.steps):
        base = nu if nu.ndim == 1 else nu[h]
        check_probability_vector(base, atol=1e-10, name="nu")
        bad = np.flatnonzero((base <= 0) & (rho > 0))
        if bad.size:
            warnings.warn(
                f"rho charges atom {bad[0]} (support point {Pi.support[bad[0]]}) "
                f"where nu_{h} is zero; coefficient is inf",
                RuntimeWarning,
                stacklevel=2,
            )
            return math.inf
        live = rho > 0
        worst = max(worst, math.sqrt(float(np.sum(rho[live] ** 2 / base[live]))))
    return worst


def angles_to_cartesian(phi):
    """Point on S^{d-1} from ``d - 1`` spherical angles."""
    phi = np.asarray(phi, dtype=float)
    d = phi.size + 1
    x = np.empty(d)
    sin_prod = 1.0
    for k in range(d - 1):
        x[k] = sin_prod * math.cos(phi[k])
        sin_prod *= math.sin(phi[k])
    x[d - 1] = sin_prod
    return x


def cartesian_to_angles(x):
    """Inverse of :func:`angles_to_cartesian`; polar angles in [0, pi], last in [0, 2 pi)."""
    x = np.asarray(x, dtype=float)
    d = x.size
    phi = np.empty(d - 1)
    for k in range(d - 2):
        phi[k] = math.atan2(np.linalg.norm(x[k + 1:]), x[k])
    phi[d - 2] = math.atan2(x[d - 1], x[d - 2]) % (2 * math.pi)
    return phi


def angle_ranges(d):
    return np.array([math.pi] * (d - 2) + [2 * math.pi])


class SphereMDP:
    """Deterministic MDP on the unit sphere S^{d-1} with actions {0, 1}.

    At step h action 0 adds ``delta`` to spherical angle ``h mod (d - 1)``
    and action 1 subtracts it; angles wrap modulo their range. The initial
    distribution is uniform on the sphere. ``reward(h, s, a)`` is supplied
    by the caller.
    """

    n_actions = 2

    def __init__(self, d, horizon, delta, reward):
        if d < 2:
            raise InvalidInputError("the sphere family needs d >= 2")
        if delta < 0:
            raise InvalidInputError("delta must be nonnegative")
        self.d = int(d)
        self.horizon = int(horizon)
        self.delta = float(delta)
        self._reward = reward
        self._ranges = angle_ranges(self.d)

    def coordinate(self, h):
        return h % (self.d - 1)

    def step(self, h, s, a):
        if a not in (0, 1):
            raise InvalidInputError(f"action {a} outside {{0, 1}}")
        phi = cartesian_to_angles(s)
        j = self.coordinate(h)
        phi[j] = (phi[j] + (self.delta if a == 0 else -self.delta)) % self._ranges[j]
        return angles_to_cartesian(phi)

    def reward(self, h, s, a):
        return float(self._reward(h, s, a))

    def sample_initial(self, rng):
        return sphere_sample(1, self.d, rng)[0]

    def metadata(self):
        return {"d": self.d, "H": self.horizon, "delta": self.delta,
                "angle_update": "h mod (d-1), wrapped modulo the angle range"}


def laplacian_reward(d, horizon, n_centers, rng):
    """Per-step rewards ``sum_j c_j exp(-||s - z_j||)`` with unit RKHS norm.

    Coefficients are nonnegative, so values lie in [0, 1]; the action is
    ignored (the kernel on state-action pairs only compares states).
    """
    k = Kernel("laplacian", 1.0)
    tables = []
    for _ in range(horizon):
        z = sphere_sample(n_centers, d, rng)
        c = np.abs(rng.standard_normal(n_centers))
        c /= math.sqrt(c @ k.gram(z) @ c)
        tables.append((z, c))

    def reward(h, s, a):
        z, c = tables[h]
        return float(np.exp(-np.linalg.norm(z - np.asarray(s), axis=1)) @ c)

    return reward


def curse_family(d, horizon, delta, reward=None, rng=None, n_centers=16):
    """Member of the sphere family; default reward from :func:`laplacian_reward`."""
    if d < 2:
        raise InvalidInputError("the sphere family needs d >= 2")
    if reward is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        reward = laplacian_reward(d, horizon, n_centers, rng)
    return SphereMDP(d, horizon, delta, reward)


def expected_return(model, policy, initial_states):
    """Mean over ``initial_states`` of the exact expected return of ``policy``.

    Transitions are deterministic, so the expectation over action draws is
    a sum over the 2^H action sequences. ``policy(h, s)`` returns action
    probabilities.
    """
    total = 0.0
    for s0 in initial_states:
        frontier = [(1.0, np.asarray(s0, dtype=float))]
        value = 0.0
        for h in range(model.horizon):
            nxt = []
            for w, s in frontier:
                p = np.asarray(policy(h, s), dtype=float)
                for a in range(model.n_actions):
                    if p[a] == 0:
                        continue
                    value += w * p[a] * model.reward(h, s, a)
                    if h + 1 < model.horizon:
                        nxt.append((w * p[a], model.step(h, s, a)))
            frontier = nxt
        total += value
    return total / len(initial_states)
