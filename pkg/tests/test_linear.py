import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from rlfa._validation import InvalidInputError
from rlfa.linear import (
    FeatureMap,
    LinearMDPSpec,
    LinearRidge,
    RidgeDesign,
    build_linear_mdp,
    check_linear_closure,
    least_squares_residual,
    random_linear_spec,
    ridge_fit,
    ridge_gradient,
    tabular_embedding,
    ucb_bonus,
)
from rlfa.mdp import FiniteMDP, evaluate_policy, random_mdp, random_policy, solve_exact


class TestFeatureMap:
    def test_tabular_onehot(self):
        fm = FeatureMap.tabular(2, 2)
        assert fm.dim == 4
        np.testing.assert_array_equal(fm.matrix, np.eye(4))
        assert fm.norm_bound == 1.0

    def test_json_round_trip(self, rng):
        fm = FeatureMap(rng.normal(size=(3, 2, 4)))
        back = FeatureMap.from_dict(fm.to_dict())
        np.testing.assert_array_equal(back.values, fm.values)
        assert FeatureMap.from_dict({"kind": "tabular-onehot", "d": 6, "S": 3, "A": 2}).dim == 6

    def test_declared_dimension_checked(self):
        with pytest.raises(InvalidInputError):
            FeatureMap.from_dict({"kind": "custom-grid", "d": 3, "values": [[[1.0, 2.0]]]})


class TestBuildAndEmbed:
    def test_round_trip_bitwise(self, rng):
        mdp = random_mdp(4, 3, 3, rng)
        back = build_linear_mdp(tabular_embedding(mdp))
        np.testing.assert_array_equal(back.transition, mdp.transition)
        np.testing.assert_array_equal(back.reward, mdp.reward)
        np.testing.assert_array_equal(back.initial, mdp.initial)

    def test_embedding_layout(self, rng):
        mdp = random_mdp(2, 2, 1, rng)
        spec = tabular_embedding(mdp)
        assert spec.features.dim == 4
        np.testing.assert_array_equal(spec.theta[0], mdp.reward[0].ravel())
        np.testing.assert_array_equal(spec.measures[0][3], mdp.transition[0, 1, 1])

    def test_zero_theta_zero_reward(self, rng):
        spec = random_linear_spec(4, 2, 2, 3, rng)
        spec = LinearMDPSpec(spec.features, np.zeros_like(spec.theta), spec.measures)
        assert np.all(build_linear_mdp(spec).reward == 0)

    def test_matches_direct_assembly(self, rng):
        spec = random_linear_spec(5, 3, 3, 4, rng)
        built = build_linear_mdp(spec)
        P = np.einsum("sad,hdt->hsat", spec.features.values, spec.measures)
        r = np.einsum("sad,hd->hsa", spec.features.values, spec.theta)
        P /= P.sum(axis=3, keepdims=True)
        direct = FiniteMDP(P, r, np.full(5, 0.2))
        assert solve_exact(built).jstar == pytest.approx(solve_exact(direct).jstar, abs=1e-12)
        np.testing.assert_allclose(built.transition, spec.induced_transition(), atol=1e-12)

    def test_invalid_row_rejected(self, rng):
        spec = random_linear_spec(3, 2, 1, 2, rng)
        M = spec.measures.copy()
        M[0, 0] = [1.5, -0.5, 0.0]
        bad = LinearMDPSpec(spec.features, spec.theta, M)
        with pytest.raises(InvalidInputError, match=r"\(h=0"):
            build_linear_mdp(bad)


class TestQLinearity:
    def test_tabular_q_pi_linear(self, rng):
        mdp = random_mdp(4, 3, 3, rng)
        fm = tabular_embedding(mdp).features
        for _ in range(20):
            q = evaluate_policy(mdp, random_policy(mdp, rng)).q.values
            for h in range(3):
                assert least_squares_residual(q[h], fm)[0] <= 1e-10

    def test_low_rank_linear_mdp(self, rng):
        spec = random_linear_spec(6, 3, 3, 4, rng)
        mdp = build_linear_mdp(spec)
        for _ in range(20):
            q = evaluate_policy(mdp, random_policy(mdp, rng)).q.values
            for h in range(3):
                assert least_squares_residual(q[h], spec.features)[0] <= 1e-10


class TestRidge:
    def test_zero_targets(self, rng):
        assert np.all(ridge_fit(RidgeDesign(rng.normal(size=(5, 3)), np.zeros(5), 0.1)) == 0)

    def test_hand_closed_form(self):
        w = ridge_fit(RidgeDesign([[1.0], [1.0]], [1.0, 1.0], lam=1.0))
        assert w == pytest.approx([0.5], abs=1e-15)

    def test_interpolation_limit(self, rng):
        X = rng.normal(size=(4, 4))
        w0 = rng.normal(size=4)
        np.testing.assert_allclose(ridge_fit(RidgeDesign(X, X @ w0, lam=1e-12)), w0, atol=1e-6)

    def test_singular_unregularized_rejected(self):
        with pytest.raises(InvalidInputError):
            ridge_fit(RidgeDesign([[1.0, 1.0], [2.0, 2.0]], [1.0, 2.0], lam=0.0))

    def test_stationarity(self, rng):
        d = RidgeDesign(rng.normal(size=(30, 5)), rng.normal(size=30), lam=0.3, n_reg=50)
        assert np.linalg.norm(ridge_gradient(d, ridge_fit(d))) <= 1e-8

    def test_min_eigenvalue_floor(self, rng):
        d = RidgeDesign(rng.normal(size=(10, 4)), rng.normal(size=10), lam=0.2)
        assert np.linalg.eigvalsh(d.gram).min() >= 10 * 0.2 - 1e-10

    def test_residual_monotone_in_lambda(self, rng):
        X = rng.normal(size=(40, 6))
        y = rng.normal(size=40)
        res = [np.linalg.norm(y - X @ ridge_fit(RidgeDesign(X, y, lam))) for lam in (1e-2, 1e-4, 1e-6)]
        assert res[0] > res[1] > res[2]

    def test_estimator_api(self, rng):
        X = rng.normal(size=(20, 3))
        y = X @ np.array([1.0, -2.0, 0.5])
        est = LinearRidge(lam=1e-10).fit(X, y)
        np.testing.assert_allclose(est.predict(X), y, atol=1e-6)
        assert clone(est).get_params() == {"lam": 1e-10, "n_reg": None}


class TestBonus:
    def test_zero_beta(self):
        assert ucb_bonus(np.ones(3), np.eye(3), 0.0) == 0.0

    def test_prior_only(self):
        assert ucb_bonus(np.array([1.0, 0.0]), np.eye(2), 2.5) == pytest.approx(2.5)

    def test_one_sample(self):
        lam = np.outer([1.0, 0.0], [1.0, 0.0]) + np.eye(2)
        assert ucb_bonus(np.array([1.0, 0.0]), lam, 1.0) == pytest.approx(1 / np.sqrt(2), abs=1e-15)
        assert ucb_bonus(np.array([0.0, 1.0]), lam, 1.0) == pytest.approx(1.0, abs=1e-15)

    def test_not_positive_definite(self):
        with pytest.raises(InvalidInputError):
            ucb_bonus(np.ones(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0)

    def test_vectorized(self, rng):
        lam = np.eye(3) * 2
        rows = rng.normal(size=(5, 3))
        np.testing.assert_allclose(ucb_bonus(rows, lam, 1.0),
                                   [ucb_bonus(r, lam, 1.0) for r in rows], atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_shrinks_as_data_accumulate(self, seed):
        r = np.random.default_rng(seed)
        d = 4
        lam = np.eye(d)
        probes = r.normal(size=(6, d))
        prev = ucb_bonus(probes, lam, 1.0)
        for _ in range(15):
            x = r.normal(size=d)
            lam = lam + np.outer(x, x)
            cur = ucb_bonus(probes, lam, 1.0)
            assert np.all(cur <= prev + 1e-12)
            prev = cur


class TestClosure:
    def test_linear_mdp_closed(self, rng):
        spec = random_linear_spec(6, 3, 2, 4, rng)
        rep = check_linear_closure(build_linear_mdp(spec), spec.features, 50, rng)
        assert rep.max_residual <= 1e-8
        assert np.isfinite(rep.constant)

    def test_zero_function_fits_reward(self, rng):
        spec = random_linear_spec(5, 2, 2, 3, rng)
        rep = check_linear_closure(build_linear_mdp(spec), spec.features, 0, rng)
        assert rep.residuals.shape == (1, 2)
        assert rep.max_residual <= 1e-10

    def test_generic_mdp_not_closed(self):
        # seed 0 is the first seed tried; its residual is far above 1e-3
        r = np.random.default_rng(0)
        mdp = random_mdp(4, 3, 2, r)
        fm = FeatureMap(r.normal(size=(4, 3, 5)))
        assert check_linear_closure(mdp, fm, 10, r).max_residual > 1e-3
