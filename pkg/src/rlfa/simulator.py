"""Access protocols: generative model, episodic simulator, regret ledger.

A :class:`GenerativeModel` answers arbitrary ``(h, s, a)`` queries. An
:class:`EpisodicSimulator` only hands out whole trajectories started from
the initial distribution; it deliberately has no ``query`` method.

Both wrap either a :class:`~rlfa.mdp.FiniteMDP` or a deterministic
continuous model exposing ``horizon``, ``n_actions``, ``sample_initial``,
``step`` and ``reward`` (see :class:`rlfa.mismatch.SphereMDP`).
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import BudgetExhaustedError, InvalidInputError
from .io import write_schema_csv
from .mdp import FiniteMDP, Policy, evaluate_policy, solve_exact

# fixed component ids so adding a stream never shifts another one
_COMPONENTS = {"simulator": 1, "algorithm": 2, "noise": 3, "policy": 4, "oracle": 5}

NOISE_MODES = ("exact", "unit-gaussian")


def rng_stream(seed, component):
    """Counter-based (Philox) generator for one component of a run."""
    try:
        key = _COMPONENTS[component]
    except KeyError:
        raise InvalidInputError(f"unknown RNG component {component!r}") from None
    ss = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))


def _is_finite(model):
    return isinstance(model, FiniteMDP)


def _sample_rows(cdf_rows, u):
    """Inverse-CDF sampling: one draw per row of ``cdf_rows``."""
    idx = (cdf_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


class GenerativeModel:
    """Simulator answering ``(h, s, a) -> (s_next, reward)`` queries.

    Parameters
    ----------
    model : FiniteMDP or deterministic continuous model
    seed : int
        Seeds independent ``simulator`` and ``noise`` streams.
    noise : {"exact", "unit-gaussian"}
        Add a standard normal draw to each returned reward.
    budget : int, optional
        Maximum number of queries; exceeding it raises
        :class:`BudgetExhaustedError`.
    log : bool
        Keep a per-query log (see :meth:`write_log`).
    """

    def __init__(self, model, seed=0, noise="exact", budget=None, log=False):
        if noise not in NOISE_MODES:
            raise InvalidInputError(f"noise must be one of {NOISE_MODES}, got {noise!r}")
        self.model = model
        self.seed = int(seed)
        self.noise = noise
        self.budget = budget
        self.query_count = 0
        self._rng = rng_stream(seed, "simulator")
        self._noise_rng = rng_stream(seed, "noise")
        self._log = [] if log else None
        if _is_finite(model):
            self._cdf = np.cumsum(model.transition, axis=3)

    @property
    def horizon(self):
        return self.model.horizon

    @property
    def n_actions(self):
        return self.model.n_actions

    def _check(self, h, s, a):
        if not 0 <= h < self.model.horizon:
            raise InvalidInputError(f"step {h} outside [0, {self.model.horizon})")
        if not 0 <= a < self.model.n_actions:
            raise InvalidInputError(f"action {a} outside [0, {self.model.n_actions})")
        if _is_finite(self.model) and not 0 <= s < self.model.n_states:
            raise InvalidInputError(f"state {s} outside [0, {self.model.n_states})")

    def _reserve(self, n, step=None):
        if self.budget is not None and self.query_count + n > self.budget:
            raise BudgetExhaustedError(
                f"query budget {self.budget} exhausted after {self.query_count} queries",
                step=step,
            )

    def query(self, h, s, a):
        """One transition sample and reward at ``(h, s, a)``."""
        self._check(h, s, a)
        self._reserve(1, step=h)
        if _is_finite(self.model):
            u = self._rng.random()
            s_next = int(min((self._cdf[h, s, a] < u).sum(), self.model.n_states - 1))
            r = float(self.model.reward[h, s, a])
        else:
            s_next = self.model.step(h, s, a)
            r = float(self.model.reward(h, s, a))
        if self.noise == "unit-gaussian":
            r += self._noise_rng.standard_normal()
        self.query_count += 1
        if self._log is not None:
            self._log.append((self.query_count - 1, h, s, a, r, s_next))
        return s_next, r

    def query_many(self, h, states, actions):
        """Vectorized queries on a finite model; same stream as looping ``query``."""
        if not _is_finite(self.model):
            out = [self.query(h, s, a) for s, a in zip(states, actions)]
            return [o[0] for o in out], np.array([o[1] for o in out])
        states = np.asarray(states, dtype=int)
        actions = np.asarray(actions, dtype=int)
        n = states.size
        if n == 0:
            return np.zeros(0, dtype=int), np.zeros(0)
        for s, a in ((states.min(), actions.min()), (states.max(), actions.max())):
            self._check(h, s, a)
        self._reserve(n, step=h)
        u = self._rng.random(n)
        s_next = _sample_rows(self._cdf[h, states, actions], u)
        r = self.model.reward[h, states, actions].astype(float)
        if self.noise == "unit-gaussian":
            r = r + self._noise_rng.standard_normal(n)
        if self._log is not None:
            base = self.query_count
            self._log.extend(
                (base + i, h, int(states[i]), int(actions[i]), float(r[i]), int(s_next[i]))
                for i in range(n)
            )
        self.query_count += n
        return s_next, r

    def write_log(self, path):
        if self._log is None:
            raise InvalidInputError("query logging was not enabled")
        return write_schema_csv(path, "query", self._log, seed=self.seed)


@dataclass
class Trajectory:
    states: list
    actions: list
    rewards: list

    @property
    def total_reward(self):
        return float(np.sum(self.rewards))

    def __len__(self):
        return len(self.actions)


@dataclass
class EpisodeBatch:
    """Vectorized trajectories of a finite MDP, arrays of shape (n, H)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def returns(self):
        return self.rewards.sum(axis=1)


class EpisodicSimulator:
    """Trajectory-only access to an MDP.

    Episodes start from ``S_1 ~ mu``; with ``agent_picks_initial=True`` the
    caller may instead pass the initial state to :meth:`reset`. Actions must
    be submitted in step order.
    """

    def __init__(self, model, seed=0, agent_picks_initial=False, record=False):
        self._model = model
        self.seed = int(seed)
        self.agent_picks_initial = agent_picks_initial
        self.episode_count = 0
        self._rng = rng_stream(seed, "simulator")
        self._policy_rng = rng_stream(seed, "policy")
        self._h = None
        self._s = None
        self._records = [] if record else None
        if _is_finite(model):
            self._cdf = np.cumsum(model.transition, axis=3)
            self._mu_cdf = np.cumsum(model.initial)

    @property
    def horizon(self):
        return self._model.horizon

    @property
    def n_actions(self):
        return self._model.n_actions

    @property
    def n_states(self):
        return self._model.n_states if _is_finite(self._model) else None

    @property
    def in_episode(self):
        return self._h is not None

    def reset(self, initial_state=None):
        """Start an episode and return S_1."""
        if self.in_episode:
            raise InvalidInputError("an episode is already in progress")
        if initial_state is not None:
            if not self.agent_picks_initial:
                raise InvalidInputError("this simulator samples S_1 from mu")
            s = initial_state
        elif _is_finite(self._model):
            u = self._rng.random()
            s = int(min((self._mu_cdf < u).sum(), self._model.n_states - 1))
        else:
            s = self._model.sample_initial(self._rng)
        self._h, self._s = 0, s
        return s

    def step(self, a):
        """Submit the action for the current step; returns ``(reward, s_next)``.

        ``s_next`` is ``None`` after the final step, which also closes the
        episode.
        """
        if not self.in_episode:
            raise InvalidInputError("no episode in progress; call reset() first")
        h, s, m = self._h, self._s, self._model
        if not 0 <= a < m.n_actions:
            raise InvalidInputError(f"action {a} outside [0, {m.n_actions})")
        if _is_finite(m):
            r = float(m.reward[h, s, a])
            u = self._rng.random()
            s_next = int(min((self._cdf[h, s, a] < u).sum(), m.n_states - 1))
        else:
            r = float(m.reward(h, s, a))
            s_next = m.step(h, s, a)
        if self._records is not None:
            self._records.append((self.episode_count, h, s, a, r, s_next))
        if h + 1 == m.horizon:
            self._h = self._s = None
            self.episode_count += 1
            return r, None
        self._h, self._s = h + 1, s_next
        return r, s_next

    def sample_action(self, probs):
        u = self._policy_rng.random()
        return int(min((np.cumsum(probs) < u).sum(), len(probs) - 1))

    def sample_episodes(self, pi, n):
        """Draw ``n`` episodes under a table policy in one vectorized pass."""
        m = self._model
        if not _is_finite(m):
            raise InvalidInputError("vectorized sampling needs a finite MDP")
        if self.in_episode:
            raise InvalidInputError("an episode is already in progress")
        pi.check_compatible(m)
        H = m.horizon
        states = np.empty((n, H), dtype=int)
        actions = np.empty((n, H), dtype=int)
        rewards = np.empty((n, H))
        s = _sample_rows(np.broadcast_to(self._mu_cdf, (n, m.n_states)), self._rng.random(n))
        pcdf = np.cumsum(pi.probs, axis=2)
        for h in range(H):
            a = _sample_rows(pcdf[h, s], self._policy_rng.random(n))
            states[:, h], actions[:, h] = s, a
            rewards[:, h] = m.reward[h, s, a]
            if h + 1 < H:
                s = _sample_rows(self._cdf[h, s, a], self._rng.random(n))
        self.episode_count += n
        return EpisodeBatch(states, actions, rewards)

    def write_trajectories(self, path):
        if self._records is None:
            raise InvalidInputError("trajectory recording was not enabled")
        return write_schema_csv(path, "trajectory", self._records, seed=self.seed)


def rollout(sim, pi, initial_state=None):
    """Run one episode of ``pi`` on ``sim``.

    ``pi`` is a :class:`~rlfa.mdp.Policy` or a callable ``(h, s) -> probs``.
    """
    if isinstance(pi, Policy):
        if pi.horizon != sim.horizon or pi.probs.shape[2] != sim.n_actions:
            raise InvalidInputError("policy does not match the simulator's horizon/actions")
        if sim.n_states is not None and pi.probs.shape[1] != sim.n_states:
            raise InvalidInputError("policy does not match the simulator's state count")
    s = sim.reset(initial_state)
    states, actions, rewards = [], [], []
    for h in range(sim.horizon):
        a = sim.sample_action(np.asarray(pi(h, s), dtype=float))
        r, s_next = sim.step(a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        s = s_next
    return Trajectory(states, actions, rewards)


@dataclass
class RegretLedger:
    """Exact per-episode regret ``J* - J(pi_k)``."""

    records: list = field(default_factory=list)
    _jstar: dict = field(default_factory=dict, repr=False)

    @property
    def instant(self):
        return np.array([r[3] for r in self.records])

    @property
    def cumulative(self):
        return np.cumsum(self.instant) if self.records else np.zeros(0)

    @property
    def total(self):
        return float(self.instant.sum()) if self.records else 0.0

    def rows(self):
        cum = self.cumulative
        return [(k, rec[3], float(c)) for k, (rec, c) in enumerate(zip(self.records, cum), 1)]

    def write_csv(self, path, seed=None):
        return write_schema_csv(path, "regret", self.rows(), seed=seed)


def record_regret(ledger, mdp, pi_k):
    """Append the exact regret of ``pi_k`` on ``mdp`` to ``ledger``."""
    key = id(mdp)
    if key not in ledger._jstar:
        ledger._jstar[key] = (mdp, solve_exact(mdp).jstar)
    jstar = ledger._jstar[key][1]
    j = evaluate_policy(mdp, pi_k).j
    ledger.records.append((len(ledger.records) + 1, jstar, j, jstar - j))
    return ledger


def regret_slope(cumulative, start=0.5):
    """Least-squares slope of log cumulative regret against log k.

    Only episodes ``k >= start * K`` with positive regret enter the fit; a
    sqrt(K) regret gives slope 1/2 and linear regret gives 1.
    """
    cum = np.asarray(cumulative, dtype=float)
    ks = np.arange(1, cum.size + 1)
    keep = (ks >= start * cum.size) & (cum > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(ks[keep]), np.log(cum[keep]), 1)[0])
