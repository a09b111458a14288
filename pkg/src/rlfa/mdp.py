"""Finite-horizon MDPs and exact dynamic programming.

Steps are indexed ``h = 0, ..., H-1`` internally; ``Q[H]`` is the implicit
zero terminal value. States and actions are integer indices into the
``states`` / ``actions`` label tuples.
"""

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import softmax

from ._validation import InvalidInputError, check_probability_vector

ROW_ATOL = 1e-12


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FiniteMDP:
    """Time-inhomogeneous finite-horizon MDP with explicit tensors.

    Parameters
    ----------
    transition : array of shape (H, S, A, S)
        ``transition[h, s, a]`` is the next-state distribution.
    reward : array of shape (H, S, A)
    initial : array of shape (S,)
    states, actions : optional label sequences; default to ``range``.
    reward_range : (low, high) or None
        Rewards are checked against this interval. ``None`` disables the
        check (used for fitted models whose rewards may leave [0, 1]).
    """

    transition: np.ndarray
    reward: np.ndarray
    initial: np.ndarray
    states: tuple = None
    actions: tuple = None
    reward_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        P = _frozen(self.transition)
        r = _frozen(self.reward)
        mu = _frozen(self.initial)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise InvalidInputError(f"transition must have shape (H, S, A, S), got {P.shape}")
        H, S, A, _ = P.shape
        if H < 1 or S < 1 or A < 1:
            raise InvalidInputError("horizon, state count and action count must be positive")
        if r.shape != (H, S, A):
            raise InvalidInputError(f"reward must have shape {(H, S, A)}, got {r.shape}")
        if mu.shape != (S,):
            raise InvalidInputError(f"initial must have shape {(S,)}, got {mu.shape}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(r))):
            raise InvalidInputError("transition and reward must be finite")
        neg = np.argwhere(P < 0)
        if neg.size:
            h, s, a, _ = neg[0]
            raise InvalidInputError(f"transition row (h={h}, s={s}, a={a}) has a negative entry")
        err = np.abs(P.sum(axis=3) - 1.0)
        if np.any(err > ROW_ATOL):
            h, s, a = np.unravel_index(np.argmax(err), err.shape)
            raise InvalidInputError(
                f"transition row (h={h}, s={s}, a={a}) sums to {P[h, s, a].sum():.15g}"
            )
        if self.reward_range is not None:
            lo, hi = self.reward_range
            bad = np.argwhere((r < lo) | (r > hi))
            if bad.size:
                h, s, a = bad[0]
                raise InvalidInputError(
                    f"reward (h={h}, s={s}, a={a}) = {r[h, s, a]:.6g} outside [{lo}, {hi}]"
                )
        check_probability_vector(mu, atol=ROW_ATOL, name="initial distribution")
        states = tuple(range(S)) if self.states is None else tuple(self.states)
        actions = tuple(range(A)) if self.actions is None else tuple(self.actions)
        if len(states) != S or len(actions) != A:
            raise InvalidInputError("label lists do not match tensor dimensions")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial", mu)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def horizon(self):
        return self.transition.shape[0]

    @property
    def n_states(self):
        return self.transition.shape[1]

    @property
    def n_actions(self):
        return self.transition.shape[2]

    def with_reward(self, reward, reward_range=None):
        """Copy of this MDP with a different reward tensor."""
        return FiniteMDP(self.transition, reward, self.initial, self.states, self.actions,
                         reward_range=reward_range)

    def to_dict(self):
        return {
            "H": self.horizon,
            "states": list(self.states),
            "actions": list(self.actions),
            "P": self.transition.tolist(),
            "r": self.reward.tolist(),
            "mu": self.initial.tolist(),
        }

    def to_json(self, indent=None):
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, doc, reward_range=(0.0, 1.0)):
        missing = {"H", "states", "actions", "P", "r", "mu"} - set(doc)
        if missing:
            raise InvalidInputError(f"MDP document missing fields {sorted(missing)}")
        mdp = cls(np.asarray(doc["P"], dtype=float), np.asarray(doc["r"], dtype=float),
                  np.asarray(doc["mu"], dtype=float), doc["states"], doc["actions"],
                  reward_range=reward_range)
        if mdp.horizon != int(doc["H"]):
            raise InvalidInputError(f"H={doc['H']} disagrees with P of horizon {mdp.horizon}")
        return mdp

    @classmethod
    def from_json(cls, text, reward_range=(0.0, 1.0)):
        return cls.from_dict(json.loads(text), reward_range=reward_range)


@dataclass(frozen=True, eq=False)
class Policy:
    """Per-step conditional action distributions ``probs[h, s, a]``.

    ``kind`` records how the table was produced (``table``, ``greedy``,
    ``softmax`` or ``parameterized-softmax``); ``params`` carries whatever
    produced it (e.g. the inverse temperature).
    """

    probs: np.ndarray
    kind: str = "table"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 3:
            raise InvalidInputError(f"policy table must have shape (H, S, A), got {p.shape}")
        if np.any(p < -ROW_ATOL) or np.any(np.abs(p.sum(axis=2) - 1.0) > ROW_ATOL):
            raise InvalidInputError("every policy row must be a probability vector")
        object.__setattr__(self, "probs", p)

    @property
    def horizon(self):
        return self.probs.shape[0]

    def __call__(self, h, s):
        return self.probs[h, s]

    def check_compatible(self, mdp):
        if self.probs.shape != (mdp.horizon, mdp.n_states, mdp.n_actions):
            raise InvalidInputError(
                f"policy shape {self.probs.shape} does not match MDP "
                f"{(mdp.horizon, mdp.n_states, mdp.n_actions)}"
            )

    @classmethod
    def deterministic(cls, actions, n_actions):
        """Policy from an integer array ``actions[h, s]``."""
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros(actions.shape + (n_actions,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=-1)
        return cls(probs, kind="table")

    @classmethod
    def uniform(cls, horizon, n_states, n_actions):
        return cls(np.full((horizon, n_states, n_actions), 1.0 / n_actions))


@dataclass(frozen=True, eq=False)
class QFunction:
    """State-action values per step, ``values[h, s, a]``.

    Linear and kernel-expansion representations keep their parameters in
    ``weights`` / ``params`` but are always materialized on the finite grid,
    so every consumer reads ``values``.
    """

    values: np.ndarray
    kind: str = "table"
    weights: np.ndarray = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 3:
            raise InvalidInputError(f"Q table must have shape (H, S, A), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("Q values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def horizon(self):
        return self.values.shape[0]

    def __call__(self, h, s, a):
        return float(self.values[h, s, a])

    def state_values(self, policy=None):
        """``V[h, s]``: max over actions, or the ``policy``-average."""
        if policy is None:
            return self.values.max(axis=2)
        return np.einsum("hsa,hsa->hs", policy.probs, self.values)

    @classmethod
    def linear(cls, weights, features):
        """Q_h(s, a) = features[s, a] . weights[h]."""
        weights = np.asarray(weights, dtype=float)
        features = np.asarray(features, dtype=float)
        values = np.einsum("sad,hd->hsa", features, weights)
        return cls(values, kind="linear", weights=weights)


@dataclass(frozen=True)
class OccupancyMeasure:
    """Distribution of (S_h, A_h) under a policy; ``probs[s, a]``."""

    step: int
    probs: np.ndarray

    @property
    def state_marginal(self):
        return self.probs.sum(axis=1)


class ExactSolution(NamedTuple):
    qstar: QFunction
    jstar: float
    pistar: Policy


class PolicyValue(NamedTuple):
    q: QFunction
    j: float


def greedy_policy(q):
    """Greedy policy; ties go to the lowest action index."""
    values = q.values if isinstance(q, QFunction) else np.asarray(q, dtype=float)
    best = np.argmax(values, axis=2)
    pol = Policy.deterministic(best, values.shape[2])
    return Policy(pol.probs, kind="greedy")


def solve_exact(mdp):
    """Backward induction for Q*, J* and a greedy optimal policy."""
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    Q = np.zeros((H, S, A))
    v_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        Q[h] = mdp.reward[h] + mdp.transition[h] @ v_next
        v_next = Q[h].max(axis=1)
    qstar = QFunction(Q)
    jstar = float(mdp.initial @ v_next)
    return ExactSolution(qstar, jstar, greedy_policy(qstar))


def evaluate_policy(mdp, pi):
    """Exact Q^pi and J(pi) by backward recursion."""
    pi.check_compatible(mdp)
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    Q = np.zeros((H, S, A))
    v_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        Q[h] = mdp.reward[h] + mdp.transition[h] @ v_next
        v_next = np.einsum("sa,sa->s", pi.probs[h], Q[h])
    return PolicyValue(QFunction(Q), float(mdp.initial @ v_next))


def occupancy(mdp, pi):
    """State-action occupancy measures, one per step, by forward chaining."""
    pi.check_compatible(mdp)
    rho = mdp.initial[:, None] * pi.probs[0]
    out = [OccupancyMeasure(0, rho)]
    for h in range(1, mdp.horizon):
        state = np.einsum("sa,sat->t", rho, mdp.transition[h - 1])
        rho = state[:, None] * pi.probs[h]
        out.append(OccupancyMeasure(h, rho))
    return out


def softmax_policy(q, beta):
    """Boltzmann policy pi_h(a|s) proportional to exp(beta * Q_h(s, a))."""
    if beta < 0 or not np.isfinite(beta):
        raise InvalidInputError(f"inverse temperature must be finite and >= 0, got {beta}")
    values = q.values if isinstance(q, QFunction) else np.asarray(q, dtype=float)
    # scipy's softmax subtracts the row max before exponentiating
    probs = softmax(beta * values, axis=2)
    return Policy(probs, kind="softmax", params={"beta": float(beta)})


def softmax_suboptimality_bound(mdp, q, beta):
    """Suboptimality of the softmax-of-``q`` policy and its a priori bound.

    Returns ``(lhs, rhs)`` with ``lhs = J* - J(pi^{q, beta})`` and
    ``rhs = H log|A| / beta + 2 beta H sum_h E max_a |Q*_h - q_h|``, the
    expectation taken exactly under the occupancy of softmax-of-Q*.
    """
    if not beta > 0:
        raise InvalidInputError("beta must be positive for the bound to be defined")
    if q.values.shape != (mdp.horizon, mdp.n_states, mdp.n_actions):
        raise InvalidInputError("Q table shape does not match the MDP")
    qstar, jstar, _ = solve_exact(mdp)
    j = evaluate_policy(mdp, softmax_policy(q, beta)).j
    lhs = jstar - j
    H, A = mdp.horizon, mdp.n_actions
    dev = np.abs(qstar.values - q.values).max(axis=2)
    rhos = occupancy(mdp, softmax_policy(qstar, beta))
    expected = sum(float(rho.state_marginal @ dev[rho.step]) for rho in rhos)
    rhs = H * np.log(A) / beta + 2.0 * beta * H * expected
    return float(lhs), float(rhs)


def apply_bellman(mdp, h, f):
    """(T_h f)(s, a) = r(h, s, a) + E_{s'} f(s')."""
    f = np.asarray(f, dtype=float)
    if f.shape != (mdp.n_states,):
        raise InvalidInputError(f"state-value vector must have shape ({mdp.n_states},)")
    return mdp.reward[h] + mdp.transition[h] @ f


def apply_bellman_optimal(mdp, h, g):
    """(T*_h g)(s, a) = r(h, s, a) + E_{s'} max_a' g(s', a')."""
    g = np.asarray(g, dtype=float)
    if g.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidInputError(
            f"state-action table must have shape ({mdp.n_states}, {mdp.n_actions})"
        )
    return apply_bellman(mdp, h, g.max(axis=1))


def performance_difference(mdp, pi, pi_ref):
    """Right-hand side of the performance-difference identity.

    ``sum_h E_{rho_h^pi} sum_a Q^{pi_ref}_h(s, a) [pi_h(a|s) - pi_ref_h(a|s)]``,
    which equals ``J(pi) - J(pi_ref)``.
    """
    q_ref = evaluate_policy(mdp, pi_ref).q.values
    total = 0.0
    for rho in occupancy(mdp, pi):
        h = rho.step
        adv = np.einsum("sa,sa->s", q_ref[h], pi.probs[h] - pi_ref.probs[h])
        total += float(rho.state_marginal @ adv)
    return total


def random_mdp(n_states, n_actions, horizon, rng, concentration=1.0):
    """MDP with Dirichlet transition rows and uniform [0, 1] rewards."""
    P = rng.dirichlet(np.full(n_states, concentration), size=(horizon, n_states, n_actions))
    r = rng.uniform(size=(horizon, n_states, n_actions))
    mu = rng.dirichlet(np.ones(n_states))
    # renormalize so rows meet the 1e-12 sum tolerance exactly
    P /= P.sum(axis=3, keepdims=True)
    mu /= mu.sum()
    return FiniteMDP(P, r, mu)


def random_policy(mdp, rng):
    probs = rng.dirichlet(np.ones(mdp.n_actions), size=(mdp.horizon, mdp.n_states))
    return Policy(probs / probs.sum(axis=2, keepdims=True))


def enumerate_deterministic_policies(mdp, limit=10**5):
    """Yield every deterministic table policy (|A|^(H*S) of them)."""
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    count = A ** (H * S)
    if count > limit:
        raise InvalidInputError(f"{count} deterministic policies exceeds the limit {limit}")
    for code in range(count):
        digits = np.empty(H * S, dtype=int)
        c = code
        for i in range(H * S):
            c, digits[i] = divmod(c, A)
        yield Policy.deterministic(digits.reshape(H, S), A)
