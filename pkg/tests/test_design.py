import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doptrec.design import (
    ContextBundle,
    SolverConfig,
    fisher_info,
    frank_wolfe_step,
    g_optimality_gap,
    leverages,
    log_det_objective,
    solve_bayesian,
    solve_d_optimal,
)
from doptrec.errors import ContractViolation, InputError, SingularDesignError

from oracles import distinct_measure, leverage_brute, simplex_grid_max

EXAMPLE_ONE = [
    [1, 1, 1, 0, 0, 0],
    [0, 0, 0, 1, 1, 1],
    [0, 0, 1, 0, 1, 1],
    [0, 0, 0, 1, 1, 1],
]
LOG_QUARTER = math.log(0.25)


def random_bundle(rng, k, d, scale=1.0):
    return ContextBundle(scale * rng.normal(size=(k, d)))


class TestFisherInfo:
    def test_basis_uniform(self):
        b = ContextBundle(np.eye(3))
        np.testing.assert_allclose(fisher_info(np.full(3, 1 / 3), b), np.eye(3) / 3, atol=1e-15)

    def test_single_arm_outer_product(self):
        b = ContextBundle([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(fisher_info([1.0, 0.0], b), [[1, 0], [0, 0]])

    def test_example_one_is_rank_deficient(self):
        b = ContextBundle(EXAMPLE_ONE)
        rng = np.random.default_rng(3)
        for _ in range(5):
            w = rng.dirichlet(np.ones(4))
            M = fisher_info(w, b)
            assert np.linalg.matrix_rank(M) <= 3
            assert abs(np.linalg.det(M)) < 1e-12

    def test_ridge_added_to_diagonal(self):
        b = ContextBundle(np.eye(2))
        np.testing.assert_allclose(fisher_info([0.5, 0.5], b, ridge=0.25), 0.75 * np.eye(2))

    def test_symmetric_psd(self):
        rng = np.random.default_rng(0)
        b = random_bundle(rng, 7, 4)
        M = fisher_info(rng.dirichlet(np.ones(7)), b, ridge=0.0)
        assert np.max(np.abs(M - M.T)) <= 1e-12
        assert np.linalg.eigvalsh(M).min() >= -1e-10

    def test_dimension_mismatch(self):
        b = ContextBundle(np.eye(3))
        with pytest.raises(ContractViolation):
            fisher_info([0.5, 0.5], b)

    def test_non_finite_features(self):
        with pytest.raises(InputError):
            ContextBundle([[1.0, np.nan], [0.0, 1.0]])

    def test_negative_ridge(self):
        with pytest.raises(ContractViolation):
            fisher_info([0.5, 0.5], ContextBundle(np.eye(2)), ridge=-1.0)


class TestBundle:
    def test_needs_two_arms(self):
        with pytest.raises(ContractViolation):
            ContextBundle([[1.0, 2.0]])

    def test_json_round_trip(self):
        b = ContextBundle(EXAMPLE_ONE, round_id=7)
        again = ContextBundle.from_json(json.dumps(b.to_json()))
        assert again.round_id == 7
        np.testing.assert_array_equal(again.arms, b.arms)

    def test_ragged_json_rejected(self):
        with pytest.raises(ContractViolation):
            ContextBundle.from_json({"round_id": 0, "arms": [[1, 2], [3]]})

    def test_arms_read_only(self):
        b = ContextBundle(np.eye(2))
        with pytest.raises(ValueError):
            b.arms[0, 0] = 5.0


class TestSolveDOptimal:
    def test_basis_arms(self):
        r = solve_d_optimal(ContextBundle(np.eye(2)), SolverConfig(ridge=0.0, epsilon=1e-6))
        np.testing.assert_allclose(r.weights, [0.5, 0.5], atol=1e-9)
        assert r.objective == pytest.approx(LOG_QUARTER, abs=1e-9)
        assert r.converged

    def test_duplicate_basis_arm(self):
        X = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
        r = solve_d_optimal(ContextBundle(X), SolverConfig(ridge=0.0, epsilon=1e-8))
        assert r.weights[0] + r.weights[1] == pytest.approx(0.5, abs=1e-6)
        _, oracle = simplex_grid_max(X)
        assert oracle == pytest.approx(LOG_QUARTER, abs=1e-9)
        assert r.objective == pytest.approx(oracle, abs=1e-4)

    def test_example_one_merges_duplicates(self):
        cfg = SolverConfig(ridge=1e-6, epsilon=1e-8)
        four = solve_d_optimal(ContextBundle(EXAMPLE_ONE), cfg)
        three = solve_d_optimal(ContextBundle(EXAMPLE_ONE[:3]), cfg)
        assert four.weights[1] + four.weights[3] == pytest.approx(three.weights[1], abs=1e-4)
        w4, v4 = simplex_grid_max(EXAMPLE_ONE, ridge=1e-6)
        w3, v3 = simplex_grid_max(EXAMPLE_ONE[:3], ridge=1e-6)
        assert w4[1] + w4[3] == pytest.approx(w3[1], abs=1e-4)
        assert four.objective == pytest.approx(v4, abs=1e-4)
        assert three.objective == pytest.approx(v3, abs=1e-4)
        # a1 alone carries theta_1 and theta_2: it is not discounted
        assert four.weights[0] == pytest.approx(1 / 3, abs=1e-4)

    def test_example_one_without_ridge_is_singular(self):
        with pytest.raises(SingularDesignError) as info:
            solve_d_optimal(ContextBundle(EXAMPLE_ONE), SolverConfig(ridge=0.0))
        assert info.value.rank == 3 and info.value.dim == 6
        assert "rank-3" in str(info.value)

    def test_max_iter_returns_best_iterate(self):
        rng = np.random.default_rng(11)
        b = random_bundle(rng, 30, 6)
        r = solve_d_optimal(b, SolverConfig(ridge=0.0, epsilon=1e-12, max_iter=2))
        assert r.iterations == 2
        assert not r.converged
        assert r.certificate_gap > 1e-12
        assert r.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert r.objective > log_det_objective(np.full(30, 1 / 30), b)

    def test_default_max_iter_formula(self):
        cfg = SolverConfig(epsilon=1e-2)
        assert cfg.resolved_max_iter(20, 5) == math.ceil(10 * (5 * math.log(math.log(20)) + 500))
        assert cfg.resolved_max_iter(2, 1) == math.ceil(10 * (math.log(math.log(3)) + 100))

    @pytest.mark.parametrize("bad", [dict(epsilon=0.0), dict(max_iter=0), dict(ridge=-1.0),
                                     dict(lambda_prior=-0.5), dict(tie_break="random")])
    def test_config_validation(self, bad):
        with pytest.raises(ContractViolation):
            SolverConfig(**bad)

    def test_json_schema(self):
        r = solve_d_optimal(ContextBundle(np.eye(2)), SolverConfig(ridge=0.0))
        doc = json.loads(json.dumps(r.to_json()))
        assert set(doc) == {"weights", "objective", "certificate_gap", "iterations", "converged"}

    def test_d_equals_one_puts_mass_on_largest(self):
        r = solve_d_optimal(ContextBundle([[0.5], [-2.0], [1.0]]), SolverConfig(ridge=0.0, epsilon=1e-9))
        np.testing.assert_allclose(r.weights, [0, 1, 0], atol=1e-12)


class TestSolveBayesian:
    def test_reduces_to_frequentist(self):
        b = ContextBundle(np.eye(2))
        cfg = SolverConfig(ridge=0.0, lambda_prior=0.0, epsilon=1e-6)
        rb = solve_bayesian(b, [], cfg)
        rf = solve_d_optimal(b, cfg)
        np.testing.assert_array_equal(rb.weights, rf.weights)
        assert rb.objective == rf.objective
        np.testing.assert_allclose(rb.weights, [0.5, 0.5])

    def test_history_on_one_direction_shifts_weight(self):
        b = ContextBundle(np.eye(2))
        history = np.tile([1.0, 0.0], (100, 1))
        r = solve_bayesian(b, history, SolverConfig(ridge=0.0, lambda_prior=1.0, epsilon=1e-8))
        assert r.weights[1] >= 0.9
        # log(c + m) + log(1 - m) is decreasing on [0, 1] for c = 100: all mass on e2
        w, _ = simplex_grid_max(np.eye(2), extra=np.diag([100.0, 0.0]))
        np.testing.assert_allclose(w, [0.0, 1.0])
        np.testing.assert_allclose(r.weights, w, atol=1e-6)

    @pytest.mark.parametrize("c", [0.25, 0.5, 0.8])
    def test_small_history_interior_optimum(self, c):
        # maximize log(c + m) + log(1 - m): m* = (1 - c) / 2
        b = ContextBundle(np.eye(2))
        history = np.array([[math.sqrt(c), 0.0]])
        r = solve_bayesian(b, history, SolverConfig(ridge=0.0, lambda_prior=1.0, epsilon=1e-10))
        assert r.weights[0] == pytest.approx((1 - c) / 2, abs=1e-6)
        w, v = simplex_grid_max(np.eye(2), extra=np.diag([c, 0.0]))
        assert r.objective == pytest.approx(v, abs=1e-4)

    def test_symmetric_history(self):
        b = ContextBundle(np.eye(2))
        history = np.vstack([np.tile([1.0, 0.0], (5, 1)), np.tile([0.0, 1.0], (5, 1))])
        r = solve_bayesian(b, history, SolverConfig(ridge=0.0, lambda_prior=0.3, epsilon=1e-9))
        np.testing.assert_allclose(r.weights, [0.5, 0.5], atol=1e-9)

    def test_history_makes_deficient_arms_solvable(self):
        b = ContextBundle([[1.0, 0.0], [2.0, 0.0]])
        r = solve_bayesian(b, [[0.0, 1.0]], SolverConfig(ridge=0.0, lambda_prior=1.0, epsilon=1e-9))
        np.testing.assert_allclose(r.weights, [0.0, 1.0], atol=1e-9)
        with pytest.raises(SingularDesignError):
            solve_bayesian(b, [], SolverConfig(ridge=0.0, lambda_prior=1.0))

    def test_history_dimension_checked(self):
        with pytest.raises(ContractViolation):
            solve_bayesian(ContextBundle(np.eye(2)), [[1.0, 2.0, 3.0]], SolverConfig(lambda_prior=1.0))


class TestGap:
    def test_uniform_basis_zero_gap(self):
        b = ContextBundle(np.eye(2))
        np.testing.assert_allclose(leverages([0.5, 0.5], b), [2.0, 2.0])
        assert g_optimality_gap([0.5, 0.5], b) == pytest.approx(0.0, abs=1e-15)

    def test_skewed_basis(self):
        b = ContextBundle(np.eye(2))
        assert g_optimality_gap([0.9, 0.1], b) == pytest.approx(4.0)

    def test_leverage_matches_brute_force(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(6, 3))
        w = rng.dirichlet(np.ones(6))
        np.testing.assert_allclose(leverages(w, ContextBundle(X), 0.1), leverage_brute(w, X, 0.1), rtol=1e-12)

    def test_singular(self):
        with pytest.raises(SingularDesignError):
            g_optimality_gap([1.0, 0.0], ContextBundle(np.eye(2)))

    def test_converged_results_certified(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            b = random_bundle(rng, int(rng.integers(3, 15)), int(rng.integers(1, 4)))
            cfg = SolverConfig(ridge=0.0, epsilon=1e-4)
            r = solve_d_optimal(b, cfg)
            assert r.converged
            assert g_optimality_gap(r.weights, b) <= cfg.epsilon + 1e-12


class TestFrankWolfeStep:
    def test_already_optimal(self):
        b = ContextBundle(np.eye(2))
        np.testing.assert_array_equal(frank_wolfe_step([0.5, 0.5], b, SolverConfig(ridge=0.0)), [0.5, 0.5])

    def test_single_step_reaches_optimum(self):
        b = ContextBundle(np.eye(2))
        # g = 10, step (10/2 - 1)/(10 - 1) = 4/9
        w = frank_wolfe_step([0.9, 0.1], b, SolverConfig(ridge=0.0))
        np.testing.assert_allclose(w, [0.9 * 5 / 9, 0.1 * 5 / 9 + 4 / 9])
        np.testing.assert_allclose(w, [0.5, 0.5])

    def test_duplicates_stay_on_simplex(self):
        b = ContextBundle([[1.0, 0.0]] * 3 + [[0.0, 1.0]])
        w = frank_wolfe_step(np.full(4, 0.25), b, SolverConfig(ridge=0.0))
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(w, [1 / 6, 1 / 6, 1 / 6, 0.5])

    def test_ties_go_to_lowest_index(self):
        b = ContextBundle([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        w = frank_wolfe_step([0.8, 0.1, 0.1], b, SolverConfig(ridge=0.0))
        assert w[1] > w[2]

    @pytest.mark.parametrize("ridge", [0.0, 1e-3])
    def test_objective_non_decreasing(self, ridge):
        rng = np.random.default_rng(2)
        b = random_bundle(rng, 12, 4)
        cfg = SolverConfig(ridge=ridge)
        w = np.full(12, 1 / 12)
        prev = log_det_objective(w, b, ridge)
        for _ in range(40):
            w = frank_wolfe_step(w, b, cfg)
            cur = log_det_objective(w, b, ridge)
            assert cur >= prev - 1e-10
            assert abs(w.sum() - 1) <= 1e-9 and np.all(w >= 0)
            prev = cur


class TestInvariants:
    def test_trace_monotone_and_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            k, d = int(rng.integers(2, 30)), int(rng.integers(1, 8))
            b = random_bundle(rng, k, d)
            r = solve_d_optimal(b, SolverConfig(ridge=1e-8, epsilon=1e-6, record_trace=True))
            assert np.all(np.diff(r.objective_trace) >= -1e-10)
            assert np.all(r.weights >= 0) and abs(r.weights.sum() - 1) <= 1e-9

    def test_bayesian_trace_monotone(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            b = random_bundle(rng, 8, 5)
            H = rng.normal(size=(20, 5)) * rng.uniform(0, 2, size=5)
            r = solve_bayesian(b, H, SolverConfig(ridge=1e-8, lambda_prior=0.1, epsilon=1e-8,
                                                  record_trace=True))
            assert r.converged
            assert np.all(np.diff(r.objective_trace) >= -1e-10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 12), d=st.integers(1, 4))
    def test_permutation_equivariance(self, seed, k, d):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(k, d))
        if k > 2:
            X[-1] = X[0]  # include a duplicate arm
        cfg = SolverConfig(ridge=1e-8, epsilon=1e-9)
        r = solve_d_optimal(ContextBundle(X), cfg)
        perm = rng.permutation(k)
        rp = solve_d_optimal(ContextBundle(X[perm]), cfg)
        a = distinct_measure(X, r.weights)
        b = distinct_measure(X[perm], rp.weights)
        assert a.keys() == b.keys()
        for key in a:
            assert a[key] == pytest.approx(b[key], abs=1e-5)
        assert r.objective == pytest.approx(rp.objective, abs=1e-7)

    def test_oracle_equivalence_small(self):
        rng = np.random.default_rng(21)
        for _ in range(12):
            k, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
            X = rng.normal(size=(k, d))
            ridge = 1e-8
            r = solve_d_optimal(ContextBundle(X), SolverConfig(ridge=ridge, epsilon=1e-8))
            _, v = simplex_grid_max(X, ridge=ridge)
            assert r.objective >= v - 1e-7
            assert r.objective == pytest.approx(v, abs=1e-4)

    def test_duplicate_collapse(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            X = rng.normal(size=(6, 3))
            dup = np.vstack([X, X[[1, 4]]])
            cfg = SolverConfig(ridge=0.0, epsilon=1e-10)
            r = solve_d_optimal(ContextBundle(X), cfg)
            rd = solve_d_optimal(ContextBundle(dup), cfg)
            assert rd.objective == pytest.approx(r.objective, abs=1e-8)
            merged = rd.weights[:6].copy()
            merged[1] += rd.weights[6]
            merged[4] += rd.weights[7]
            np.testing.assert_allclose(merged, r.weights, atol=1e-6)

    def test_support_bound(self):
        rng = np.random.default_rng(13)
        for _ in range(40):
            k, d = int(rng.integers(5, 50)), int(rng.integers(1, 7))
            b = random_bundle(rng, k, d)
            r = solve_d_optimal(b, SolverConfig(ridge=0.0 if k >= d else 1e-8, epsilon=1e-9))
            assert r.converged
            assert np.sum(r.weights > 1e-6) <= d * (d + 1) / 2

    @pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(17)
        X = rng.normal(size=(15, 4))
        cfg = SolverConfig(ridge=0.0, epsilon=1e-10)
        r = solve_d_optimal(ContextBundle(X), cfg)
        rc = solve_d_optimal(ContextBundle(c * X), cfg)
        np.testing.assert_allclose(rc.weights, r.weights, atol=1e-6)
        assert rc.objective == pytest.approx(r.objective + 2 * 4 * math.log(c), abs=1e-8)
