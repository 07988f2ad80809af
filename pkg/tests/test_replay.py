import csv
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from doptrec.data import MovieLensData, RatingTable, UserMeta, make_synthetic_movielens
from doptrec.errors import ContractViolation, SimulationError, UndefinedMetricError
from doptrec.policies import Decision, Policy, UniformPolicy
from doptrec.replay import (
    BASELINE_MENU,
    LinearWorld,
    SimConfig,
    ablation_suite,
    cumulative_recall,
    estimation_error,
    init_replay,
    linear_run,
    run_epoch,
    run_simulation,
    write_ablation,
    write_outputs,
)

TRACE = json.loads((Path(__file__).parent / "golden" / "replay_toy_trace.json").read_text())


def table(rows):
    u, i, r = (np.array(c) for c in zip(*rows))
    return RatingTable(u, i, r, np.zeros(len(u)))


def toy_data():
    rows = TRACE["train"] + TRACE["test"]
    users = {1: UserMeta("F", 25, 1), 2: UserMeta("M", 25, 1)}
    return MovieLensData(table(rows), users, {})


class ScriptedPolicy(Policy):
    """Picks a fixed arm per user; the user is read off the gender one-hot."""

    def __init__(self, arms_by_user):
        self.arms_by_user = arms_by_user
        self.seen = []

    def select(self, bundle):
        user = 1 if bundle.arms[0][0] == 1.0 else 2
        return Decision(self.arms_by_user[user], 1.0, "explore", "scripted")

    def update(self, bundle, decision, reward):
        self.seen.append(reward)


def toy_state(policy, seed=0):
    return init_replay(toy_data(), {}, seed, recommenders=TRACE["recommenders"],
                       train=table(TRACE["train"]), test=table(TRACE["test"]), policy=policy)


class TestRecall:
    def test_ratio(self):
        assert cumulative_recall(5, 50) == 0.1
        assert cumulative_recall([2, 0, 3], 50) == 0.1

    def test_empty_numerator(self):
        assert cumulative_recall([], 10) == 0.0

    def test_zero_positives(self):
        with pytest.raises(UndefinedMetricError):
            cumulative_recall(0, 0)


class TestToyTrace:
    def test_hand_traced_proposals(self):
        state = toy_state(ScriptedPolicy({1: 0, 2: 0}))
        assert state.positives_total == TRACE["positives_total"]
        for user, expected in TRACE["proposals"].items():
            recs = state.candidates.recommend_all(state.store, int(user), 1)
            assert [r.items[0] for r in recs] == expected

    @pytest.mark.parametrize("case", TRACE["cases"], ids=lambda c: f"arms{c['arms']['1']}{c['arms']['2']}")
    def test_epoch_transition(self, case):
        script = {int(u): a for u, a in case["arms"].items()}
        state = toy_state(ScriptedPolicy(script))
        before = {(u, i) for u in (1, 2) for i in state.store.history(u)}
        m = run_epoch(state)
        after = {(u, i) for u in (1, 2) for i in state.store.history(u)}
        assert after - before == {(u, i) for u, i, _ in case["added"]}
        for u, i, r in case["added"]:
            assert state.store.rating(u, i) == r
        assert {(u, i) for u in (1, 2) for i in state.store.rejected(u)} == {tuple(p) for p in case["rejected"]}
        assert state.test == {(u, i): float(r) for u, i, r in case["remaining_test"]}
        assert {e.user_id: e.reward for e in state.log} == {int(u): r for u, r in case["rewards"].items()}
        assert m.successes == case["successes"]
        assert m.cumulative_recall == case["successes"] / TRACE["positives_total"]
        assert m.rounds == 2 and m.skipped == 0
        expected_traffic = np.bincount(list(script.values()), minlength=3) / 2
        np.testing.assert_array_equal(m.traffic, expected_traffic)

    def test_uniform_policy_consistent_with_trace(self):
        state = toy_state(UniformPolicy(3, 1, seed=3))
        run_epoch(state)
        for e in state.log:
            assert e.item_id == TRACE["proposals"][str(e.user_id)][e.arm]
            assert e.propensity == pytest.approx(1 / 3)

    def test_exhausted_users_skipped(self):
        state = toy_state(ScriptedPolicy({1: 0, 2: 0}))
        metrics = [run_epoch(state) for _ in range(8)]
        assert metrics[-1].rounds == 0 and metrics[-1].skipped == 2
        np.testing.assert_array_equal(metrics[-1].traffic, np.zeros(3))


def check_invariants(state, metrics, initial_test):
    pairs = [(e.user_id, e.item_id) for e in state.log]
    assert len(pairs) == len(set(pairs)), "a (user, item) pair was recommended twice"
    recall = [m.cumulative_recall for m in metrics]
    assert np.all(np.diff(recall) >= 0) and 0.0 <= recall[-1] <= 1.0
    for m in metrics:
        if m.rounds:
            assert m.traffic.sum() == pytest.approx(1.0)
    # every test removal lands in exactly one place
    moved = [p for p, e in zip(pairs, state.log) if e.in_test]
    rejected = [p for p, e in zip(pairs, state.log) if not e.in_test]
    assert set(moved) | set(state.test) == set(initial_test)
    assert not set(moved) & set(state.test)
    assert state.store.n_rejected() == len(rejected)
    assert all(p not in initial_test for p in rejected)


class TestProtocolInvariants:
    @pytest.mark.parametrize("policy", BASELINE_MENU, ids=lambda p: p["policy"])
    def test_synthetic_movielens(self, policy):
        data = make_synthetic_movielens(n_users=40, n_movies=60, ratings_per_user=25, seed=1)
        state = init_replay(data, policy, seed=2, initial_fraction=0.2, mf_params={"n_iters": 3})
        initial = dict(state.test)
        metrics = [run_epoch(state) for _ in range(4)]
        check_invariants(state, metrics, initial)
        assert metrics[-1].cumulative_successes == sum(m.successes for m in metrics)

    def test_reward_is_binarized_label(self):
        data = make_synthetic_movielens(n_users=30, n_movies=40, ratings_per_user=20, seed=3)
        state = init_replay(data, {"policy": "eps_greedy"}, seed=0, initial_fraction=0.2, mf_params={"n_iters": 2})
        initial = dict(state.test)
        for _ in range(2):
            run_epoch(state)
        for e in state.log:
            assert e.reward == (float(initial[(e.user_id, e.item_id)] >= 2.5) if e.in_test else 0.0)


def small_config(**kw):
    base = dict(epochs=3, runs=2, initial_fraction=0.2, world="synthetic_movielens", n_users=None,
                synthetic={"n_users": 30, "n_movies": 40, "ratings_per_user": 20}, mf_params={"n_iters": 2},
                policies=({"policy": "eps_greedy"},))
    return SimConfig(**{**base, **kw})


class TestSimulation:
    def test_single_run_zero_std(self):
        res = run_simulation(small_config(runs=1))
        np.testing.assert_array_equal(res.curves["eps_greedy"].std, 0.0)

    def test_duplicate_labels_identical(self):
        cfg = small_config(policies=({"policy": "lin_ts", "label": "a"}, {"policy": "lin_ts", "label": "b"}))
        res = run_simulation(cfg)
        np.testing.assert_array_equal(res.curves["a"].mean, res.curves["b"].mean)
        np.testing.assert_array_equal(res.curves["a"].traffic, res.curves["b"].traffic)

    def test_deterministic_and_parallel(self):
        a = run_simulation(small_config())
        b = run_simulation(small_config(n_jobs=2))
        np.testing.assert_array_equal(a.curves["eps_greedy"].curves, b.curves["eps_greedy"].curves)
        assert a.curves["eps_greedy"].mean[0] == 0.0
        assert len(a.curves["eps_greedy"].mean) == 4

    def test_failing_run_names_seed(self):
        cfg = small_config(policies=({"policy": "eps_greedy", "params": {"bogus": 1}},), seed=7)
        with pytest.raises(SimulationError) as info:
            run_simulation(cfg)
        assert info.value.seed == 7 and "seed 7" in str(info.value)

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"runs": 0}, {"initial_fraction": 1.0}, {"world": "mars"},
                                    {"policies": ({"policy": "a"}, {"policy": "a"})}])
    def test_config_validation(self, kw):
        with pytest.raises(ContractViolation):
            small_config(**kw)

    def test_movielens_world_needs_path(self):
        with pytest.raises(ContractViolation):
            run_simulation(small_config(world="movielens"))

    def test_outputs(self, tmp_path):
        res = run_simulation(small_config())
        paths = write_outputs(res, tmp_path)
        with open(tmp_path / "recall_curves.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "policy", "mean", "std"]
        assert len(rows) == 1 + 4
        with open(tmp_path / "traffic_eps_greedy.csv") as fh:
            traffic = list(csv.DictReader(fh))
        assert list(traffic[0]) == ["epoch", "arm", "share"]
        by_epoch = Counter()
        for r in traffic:
            by_epoch[r["epoch"]] += float(r["share"])
        assert all(v == pytest.approx(1.0) for v in by_epoch.values())
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["seeds"] == [0, 1] and "eps_greedy" in summary["policies"]
        assert all(p.exists() for p in paths)


class TestLinearWorld:
    def test_gain_range_and_determinism(self):
        w = LinearWorld(seed=1)
        cfg = {"policy": "stagewise_freq"}
        a, b = linear_run(w, cfg, 3, 4), linear_run(w, cfg, 3, 4)
        np.testing.assert_array_equal(a.curve, b.curve)
        assert np.all(np.diff(a.curve) >= 0) and a.curve[-1] <= 1.0

    def test_optimal_design_estimation_error(self):
        errs = {d: np.array([estimation_error(LinearWorld(seed=s), d, 200, s) for s in range(20)])
                for d in ("optimal", "uniform")}
        assert np.median(errs["optimal"]) <= np.median(errs["uniform"])
        assert np.mean(errs["optimal"] < errs["uniform"]) >= 0.7

    def test_bad_design(self):
        with pytest.raises(ContractViolation):
            estimation_error(LinearWorld(), "random")

    @pytest.mark.xfail(reason="exploit phases are near-perfect for both designs at sigma=0.1, so the final-epoch "
                              "gap is set by which arms each design pulls while exploring", strict=False)
    def test_final_epoch_ordering(self):
        wins = 0
        for s in range(20):
            w = LinearWorld(seed=s)
            o = linear_run(w, {"policy": "stagewise_freq", "params": {"design": "optimal"}}, s, 10).curve
            u = linear_run(w, {"policy": "stagewise_freq", "params": {"design": "uniform"}}, s, 10).curve
            wins += o[-1] >= u[-1]
        assert wins / 20 >= 0.7


@pytest.fixture(scope="module")
def null_world():
    cfg = SimConfig(epochs=5, runs=5, world="linear", linear={"d_user": 4, "context_effect": 0.0},
                    policies=({"policy": "stagewise_freq"},))
    return ablation_suite(cfg)


class TestAblation:

    def test_cells_and_epoch_zero(self, null_world, tmp_path):
        assert set(null_world.cells) == {(True, "optimal"), (True, "uniform"), (False, "optimal"), (False, "uniform")}
        for diff in list(null_world.context_diff.values()) + list(null_world.design_diff.values()):
            assert diff[0] == 0.0
        paths = write_ablation(null_world, tmp_path)
        assert len(paths) == 5

    def test_null_world_within_noise(self, null_world):
        for design, diff in null_world.context_diff.items():
            assert np.all(np.abs(diff) <= 2 * null_world.pooled_std[design] + 1e-12)

    @pytest.mark.xfail(reason="the first epoch is pure exploration, so the early gap reflects the explored "
                              "arms' rewards rather than estimation quality", strict=False)
    def test_design_gap_positive_early(self):
        cfg = SimConfig(epochs=3, runs=20, world="linear", policies=({"policy": "stagewise_freq"},))
        ab = ablation_suite(cfg)
        assert np.all(ab.design_diff[True][1:] > 0)
