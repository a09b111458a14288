import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlfa._validation import InvalidInputError
from rlfa.mdp import (
    FiniteMDP,
    Policy,
    QFunction,
    apply_bellman,
    apply_bellman_optimal,
    enumerate_deterministic_policies,
    evaluate_policy,
    occupancy,
    performance_difference,
    random_mdp,
    random_policy,
    softmax_policy,
    softmax_suboptimality_bound,
    solve_exact,
)
from rlfa.simulator import EpisodicSimulator

from conftest import chain_mdp


def one_state_mdp(rewards, horizon=1):
    A = len(rewards)
    P = np.ones((horizon, 1, A, 1))
    r = np.tile(np.asarray(rewards, dtype=float), (horizon, 1, 1))
    return FiniteMDP(P, r, [1.0])


class TestValidation:
    def test_bad_row_names_offender(self):
        P = np.full((2, 2, 1, 2), 0.5)
        P[1, 0, 0] = [0.7, 0.7]
        with pytest.raises(InvalidInputError, match=r"h=1, s=0, a=0"):
            FiniteMDP(P, np.zeros((2, 2, 1)), [0.5, 0.5])

    def test_reward_out_of_range(self):
        with pytest.raises(InvalidInputError, match="outside"):
            one_state_mdp([1.5])

    def test_reward_range_flag(self):
        mdp = FiniteMDP(np.ones((1, 1, 1, 1)), [[[3.0]]], [1.0], reward_range=(0.0, 5.0))
        assert solve_exact(mdp).jstar == 3.0

    def test_initial_must_sum_to_one(self):
        with pytest.raises(InvalidInputError):
            FiniteMDP(np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1)), [0.9])

    def test_json_round_trip(self, rng):
        mdp = random_mdp(3, 2, 2, rng)
        doc = json.loads(mdp.to_json())
        assert set(doc) == {"H", "states", "actions", "P", "r", "mu"}
        assert np.asarray(doc["P"]).shape == (2, 3, 2, 3)
        back = FiniteMDP.from_json(mdp.to_json())
        np.testing.assert_array_equal(back.transition, mdp.transition)
        np.testing.assert_array_equal(back.reward, mdp.reward)
        np.testing.assert_array_equal(back.initial, mdp.initial)


class TestSolveExact:
    def test_constant_reward_chain(self):
        assert solve_exact(one_state_mdp([1.0], horizon=3)).jstar == 3.0

    def test_two_armed(self):
        sol = solve_exact(one_state_mdp([0.2, 0.7]))
        assert sol.jstar == pytest.approx(0.7, abs=1e-15)
        np.testing.assert_array_equal(sol.pistar.probs[0, 0], [0.0, 1.0])

    def test_tie_breaks_to_lowest_index(self):
        sol = solve_exact(one_state_mdp([0.5, 0.5, 0.5]))
        np.testing.assert_array_equal(sol.pistar.probs[0, 0], [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_policy_enumeration(self, seed):
        mdp = random_mdp(3, 2, 2, np.random.default_rng(seed))
        best = max(evaluate_policy(mdp, pi).j for pi in enumerate_deterministic_policies(mdp))
        assert abs(solve_exact(mdp).jstar - best) <= 1e-10

    def test_fixed_point(self, rng):
        mdp = random_mdp(4, 3, 4, rng)
        Q = solve_exact(mdp).qstar.values
        for h in range(mdp.horizon):
            nxt = Q[h + 1] if h + 1 < mdp.horizon else np.zeros_like(Q[0])
            np.testing.assert_allclose(apply_bellman_optimal(mdp, h, nxt), Q[h], atol=1e-12)

    def test_dominates_random_policies(self, rng):
        mdp = random_mdp(4, 3, 3, rng)
        jstar = solve_exact(mdp).jstar
        for _ in range(100):
            assert evaluate_policy(mdp, random_policy(mdp, rng)).j <= jstar + 1e-10


class TestEvaluatePolicy:
    def test_optimal_policy_value(self, rng):
        mdp = random_mdp(4, 2, 3, rng)
        sol = solve_exact(mdp)
        assert abs(evaluate_policy(mdp, sol.pistar).j - sol.jstar) <= 1e-10

    def test_zero_reward(self, rng):
        mdp = random_mdp(3, 2, 3, rng).with_reward(np.zeros((3, 3, 2)), (0.0, 1.0))
        assert evaluate_policy(mdp, random_policy(mdp, rng)).j == 0.0

    def test_shape_mismatch_rejected(self, rng):
        mdp = random_mdp(3, 2, 2, rng)
        with pytest.raises(InvalidInputError):
            evaluate_policy(mdp, Policy.uniform(2, 4, 2))

    @pytest.mark.slow
    def test_monte_carlo_rollouts(self):
        rng = np.random.default_rng(11)
        mdp = random_mdp(3, 2, 3, rng)
        pi = random_policy(mdp, rng)
        j = evaluate_policy(mdp, pi).j
        returns = EpisodicSimulator(mdp, seed=5).sample_episodes(pi, 10**6).returns
        se = returns.std(ddof=1) / np.sqrt(returns.size)
        assert abs(returns.mean() - j) <= 3 * se

    def test_value_views_are_derived(self, rng):
        mdp = random_mdp(3, 2, 2, rng)
        pi = random_policy(mdp, rng)
        q = evaluate_policy(mdp, pi).q
        v = q.state_values(pi)
        np.testing.assert_allclose(v[0] @ mdp.initial, evaluate_policy(mdp, pi).j, atol=1e-14)


class TestOccupancy:
    def test_first_step_is_product(self, rng):
        mdp = random_mdp(3, 2, 2, rng)
        pi = random_policy(mdp, rng)
        np.testing.assert_array_equal(occupancy(mdp, pi)[0].probs,
                                      mdp.initial[:, None] * pi.probs[0])

    def test_deterministic_chain_point_masses(self):
        mdp = chain_mdp(horizon=3, n_states=4)
        rhos = occupancy(mdp, Policy.uniform(3, 4, 1))
        for h, rho in enumerate(rhos):
            expect = np.zeros((4, 1))
            expect[h, 0] = 1.0
            np.testing.assert_array_equal(rho.probs, expect)

    def test_levels_sum_to_one(self, rng):
        mdp = random_mdp(5, 3, 4, rng)
        for rho in occupancy(mdp, random_policy(mdp, rng)):
            assert abs(rho.probs.sum() - 1.0) <= 1e-10
            assert rho.probs.min() >= 0

    @pytest.mark.slow
    def test_matches_visit_frequencies(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(3, 2, 3, rng)
        pi = random_policy(mdp, rng)
        n = 10**6
        batch = EpisodicSimulator(mdp, seed=9).sample_episodes(pi, n)
        for rho in occupancy(mdp, pi):
            h = rho.step
            idx = batch.states[:, h] * 2 + batch.actions[:, h]
            freq = np.bincount(idx, minlength=6) / n
            p = rho.probs.ravel()
            se = np.sqrt(p * (1 - p) / n)
            assert np.all(np.abs(freq - p) <= 3 * se + 1e-12)


class TestSoftmax:
    def test_constant_rows_uniform(self):
        q = QFunction(np.full((2, 3, 4), 0.3))
        for beta in (0.0, 1.0, 1e6):
            np.testing.assert_allclose(softmax_policy(q, beta).probs, 0.25, atol=1e-15)

    def test_beta_zero_uniform(self, rng):
        q = QFunction(rng.normal(size=(2, 3, 4)))
        np.testing.assert_allclose(softmax_policy(q, 0.0).probs, 0.25)

    def test_two_action_gap(self):
        q = QFunction(np.array([[[1.0, 0.0]]]))
        p = softmax_policy(q, 10.0).probs[0, 0, 0]
        assert p == pytest.approx(0.9999546021312976, abs=1e-15)

    def test_large_beta_no_overflow(self):
        q = QFunction(np.array([[[3.0, 2.0, 2.5]]]))
        p = softmax_policy(q, 1e6).probs
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p[0, 0], [1.0, 0.0, 0.0])

    def test_negative_beta_rejected(self):
        with pytest.raises(InvalidInputError):
            softmax_policy(QFunction(np.zeros((1, 1, 2))), -1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 50.0))
    def test_shift_invariance(self, seed, beta):
        r = np.random.default_rng(seed)
        vals = r.normal(size=(2, 3, 4))
        shift = r.normal(size=(2, 3, 1)) * 10
        a = softmax_policy(QFunction(vals), beta).probs
        b = softmax_policy(QFunction(vals + shift), beta).probs
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestSuboptimalityBound:
    def test_exact_q_leaves_entropy_term(self, rng):
        mdp = random_mdp(4, 3, 3, rng)
        qstar = solve_exact(mdp).qstar
        lhs, rhs = softmax_suboptimality_bound(mdp, qstar, 2.0)
        assert rhs == pytest.approx(3 * np.log(3) / 2.0, rel=1e-14)
        assert 0 <= lhs <= rhs

    def test_single_action(self, rng):
        mdp = random_mdp(4, 1, 3, rng)
        q = QFunction(rng.uniform(size=(3, 4, 1)))
        lhs, rhs = softmax_suboptimality_bound(mdp, q, 1.5)
        assert abs(lhs) <= 1e-14
        assert rhs >= 0

    def test_beta_zero_rejected(self, rng):
        mdp = random_mdp(2, 2, 1, rng)
        with pytest.raises(InvalidInputError):
            softmax_suboptimality_bound(mdp, solve_exact(mdp).qstar, 0.0)

    def test_many_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            mdp = random_mdp(int(rng.integers(1, 5)), int(rng.integers(1, 4)),
                             int(rng.integers(1, 4)), rng)
            qstar = solve_exact(mdp).qstar.values
            q = QFunction(qstar + rng.normal(scale=rng.uniform(0, 0.5), size=qstar.shape))
            beta = float(rng.choice([0.5, 1.0, 2.0, 8.0]))
            lhs, rhs = softmax_suboptimality_bound(mdp, q, beta)
            assert lhs >= -1e-8 and rhs - lhs >= -1e-8


class TestBellman:
    def test_zero_function_gives_reward(self, rng):
        mdp = random_mdp(3, 2, 2, rng)
        np.testing.assert_array_equal(apply_bellman(mdp, 1, np.zeros(3)), mdp.reward[1])

    def test_dimension_mismatch(self, rng):
        mdp = random_mdp(3, 2, 2, rng)
        with pytest.raises(InvalidInputError):
            apply_bellman(mdp, 0, np.zeros(4))
        with pytest.raises(InvalidInputError):
            apply_bellman_optimal(mdp, 0, np.zeros((3, 3)))

    def test_monotone(self, rng):
        mdp = random_mdp(5, 3, 2, rng)
        for _ in range(50):
            f = rng.uniform(-1, 1, size=5)
            g = f + rng.uniform(0, 1, size=5)
            assert np.all(apply_bellman(mdp, 0, f) <= apply_bellman(mdp, 0, g) + 1e-15)


def test_performance_difference_identity(rng):
    for _ in range(20):
        mdp = random_mdp(4, 3, 3, rng)
        pi, ref = random_policy(mdp, rng), random_policy(mdp, rng)
        diff = evaluate_policy(mdp, pi).j - evaluate_policy(mdp, ref).j
        assert abs(performance_difference(mdp, pi, ref) - diff) <= 1e-9
