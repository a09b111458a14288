import numpy as np
import pytest

from rlfa.mdp import FiniteMDP


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def chain_mdp(horizon=3, n_states=3):
    """Deterministic single-action chain 0 -> 1 -> 2 ... with reward 1."""
    P = np.zeros((horizon, n_states, 1, n_states))
    for h in range(horizon):
        for s in range(n_states):
            P[h, s, 0, min(s + 1, n_states - 1)] = 1.0
    mu = np.zeros(n_states)
    mu[0] = 1.0
    return FiniteMDP(P, np.ones((horizon, n_states, 1)), mu)


def mc_within(samples, expected, k=3.0):
    """|mean - expected| <= k standard errors."""
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    return abs(samples.mean() - expected) <= k * se + 1e-15
