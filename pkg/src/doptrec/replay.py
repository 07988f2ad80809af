"""Replay simulation of online recommender selection.

The MovieLens replay splits the ratings into an initial training set and a
held-out test set.  Each epoch visits every user once in a seeded random
order.  The candidate recommenders each propose their top eligible item, the
policy picks one recommender (arm) from the per-arm context features, and the
item is shown.  If the user rated it in the test set the rating moves to the
training data and the reward is its binary label; otherwise the pair joins the
rejection list with reward 0.  Recommenders are retrained after each epoch.
Cumulative recall is successes so far over the positive test ratings at the
start.

A synthetic linear world with known parameters (fixed arms, optional user
context, Gaussian noise) supports checks that need ground truth.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import FeatureMap, FeatureMapConfig, MovieLensData, RatingTable, make_synthetic_movielens, split_initial
from .design import ContextBundle, SolverConfig, solve_d_optimal, uniform_weights
from .errors import ContractViolation, SimulationError, UndefinedMetricError
from .models import ObservationRecord, fit_arrays
from .policies import Policy, make_policy
from .recommenders import RECOMMENDER_NAMES, CandidateSet, RatingsStore

log = logging.getLogger(__name__)

# the six-policy menu used by --policies all
BASELINE_MENU: tuple[dict[str, Any], ...] = (
    {"policy": "eps_greedy", "params": {"epsilon": 0.1}},
    {"policy": "beta_ts", "params": {}},
    {"policy": "linucb", "params": {"alpha_ucb": 1.0}},
    {"policy": "lin_ts", "params": {}},
    {"policy": "stagewise_freq", "params": {"design": "optimal"}},
    {"policy": "stagewise_bayes", "params": {}},
)


def policy_label(cfg: dict[str, Any]) -> str:
    return str(cfg.get("label") or cfg["policy"])


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochMetrics:
    epoch: int
    successes: int
    cumulative_successes: int
    cumulative_recall: float
    traffic: np.ndarray | None  # per-arm share of this epoch's non-skipped rounds
    rounds: int = 0
    skipped: int = 0


def cumulative_recall(successes: Sequence[int] | int, positives_total: int) -> float:
    """Successes so far divided by the positive test ratings at the start."""
    if positives_total <= 0:
        raise UndefinedMetricError("no positive ratings in the test data; recall is undefined")
    total = successes if isinstance(successes, (int, np.integer)) else int(np.sum(successes))
    return total / positives_total


# ---------------------------------------------------------------------------
# MovieLens replay


@dataclass
class ReplayLogEntry:
    epoch: int
    user_id: int
    item_id: int
    arm: int
    propensity: float
    reward: float
    in_test: bool


@dataclass
class ReplayState:
    store: RatingsStore
    test: dict[tuple[int, int], float]
    candidates: CandidateSet
    policy: Policy
    features: FeatureMap
    users: np.ndarray
    positives_total: int
    seed: int
    epoch: int = 0
    cumulative_successes: int = 0
    log: list[ReplayLogEntry] = field(default_factory=list)
    history: list[ObservationRecord] = field(default_factory=list)


def init_replay(data: MovieLensData, policy_cfg: dict[str, Any], seed: int, initial_fraction: float = 0.1,
                feature_cfg: FeatureMapConfig | None = None, recommenders: Sequence[str] = RECOMMENDER_NAMES,
                mf_params: dict | None = None, train: RatingTable | None = None,
                test: RatingTable | None = None, policy: Policy | None = None) -> ReplayState:
    """Split, train the candidates and build the policy for one run.

    ``train``/``test`` override the seeded split and ``policy`` overrides the
    configured one (used by hand-built fixtures).
    """
    if train is None or test is None:
        train, test = split_initial(data.ratings, initial_fraction, seed)
    users = np.unique(np.concatenate([data.ratings.user, np.array(list(data.users), dtype=np.int64)]))
    items = set(data.ratings.movie.tolist()) | set(data.movies)
    store = RatingsStore(train, catalog_users=users.tolist(), catalog_items=items)
    test_map = {(int(u), int(i)): float(r) for u, i, r in zip(test.user, test.movie, test.rating)}
    candidates = CandidateSet(recommenders, seed=seed, mf_params=mf_params)
    candidates.train(store)
    fmap = FeatureMap(feature_cfg or FeatureMapConfig(), data.users, data.movies)
    if policy is None:
        policy = make_policy({**policy_cfg, "seed": [seed, 1]}, len(candidates), fmap.d)
    positives = int(np.sum(test.labels()))
    return ReplayState(store, test_map, candidates, policy, fmap, users, positives, seed)


def run_epoch(state: ReplayState) -> EpochMetrics:
    """One pass over all users, then retrain the candidates."""
    state.epoch += 1
    rng = np.random.default_rng([state.seed, 2, state.epoch])
    k = len(state.candidates)
    counts = np.zeros(k)
    successes = skipped = rounds = 0
    missing_movie = state.features.movie(-1)
    for u in rng.permutation(state.users).tolist():
        recs = state.candidates.recommend_all(state.store, u, 1)
        items = [r.items[0] if r.items else None for r in recs]
        if all(i is None for i in items):
            skipped += 1
            continue
        user_vec = state.features.user(u)
        arms = np.array([np.concatenate([user_vec, state.features.movie(i) if i is not None else missing_movie])
                         for i in items])
        bundle = ContextBundle(arms, round_id=len(state.history))
        decision = state.policy.select(bundle)
        item = items[decision.arm_index]
        if item is None:
            skipped += 1
            continue
        key = (u, item)
        if key in state.test:
            rating = state.test.pop(key)
            state.store.add(u, item, rating)
            reward = float(rating >= 2.5)
            in_test = True
        else:
            state.store.reject(u, item)
            reward = 0.0
            in_test = False
        successes += int(reward)
        rounds += 1
        counts[decision.arm_index] += 1
        state.policy.update(bundle, decision, reward)
        state.history.append(ObservationRecord(len(state.history), arms[decision.arm_index], decision.arm_index,
                                               decision.propensity, reward))
        state.log.append(ReplayLogEntry(state.epoch, u, item, decision.arm_index, decision.propensity, reward, in_test))
    state.cumulative_successes += successes
    state.candidates.train(state.store)
    traffic = counts / rounds if rounds else np.zeros(k)
    return EpochMetrics(state.epoch, successes, state.cumulative_successes,
                        cumulative_recall(state.cumulative_successes, state.positives_total), traffic, rounds, skipped)


def epoch_zero() -> EpochMetrics:
    return EpochMetrics(0, 0, 0, 0.0, None)


@dataclass
class RunResult:
    label: str
    seed: int
    metrics: list[EpochMetrics]

    @property
    def curve(self) -> np.ndarray:
        return np.array([m.cumulative_recall for m in self.metrics])

    @property
    def traffic(self) -> np.ndarray:
        return np.array([m.traffic for m in self.metrics[1:]])


def replay_run(data: MovieLensData, policy_cfg: dict[str, Any], seed: int, epochs: int,
               initial_fraction: float = 0.1, feature_cfg: FeatureMapConfig | None = None,
               recommenders: Sequence[str] = RECOMMENDER_NAMES, mf_params: dict | None = None) -> RunResult:
    state = init_replay(data, policy_cfg, seed, initial_fraction, feature_cfg, recommenders, mf_params)
    metrics = [epoch_zero()]
    for _ in range(epochs):
        metrics.append(run_epoch(state))
    return RunResult(policy_label(policy_cfg), seed, metrics)


# ---------------------------------------------------------------------------
# synthetic linear world


@dataclass
class LinearWorld:
    """Fixed arms with known linear rewards and optional additive user context.

    Arms form a tight cluster around one direction plus a few spread-out
    arms, so uniform exploration spends most rounds on near-duplicates.
    ``context_effect=0`` gives a world where user features carry no reward
    signal.
    """

    d: int = 8
    k: int = 20
    d_user: int = 0
    sigma: float = 0.1
    n_spread: int = 5
    cluster_noise: float = 0.15
    context_effect: float = 1.0
    seed: int = 0
    arms: np.ndarray = field(init=False)
    theta: np.ndarray = field(init=False)
    theta_user: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if not 1 <= self.n_spread <= self.k:
            raise ContractViolation("n_spread must lie in [1, k]")
        rng = np.random.default_rng([self.seed, 7])
        center = rng.normal(size=self.d)
        center /= np.linalg.norm(center)
        n_cluster = self.k - self.n_spread
        cluster = center + self.cluster_noise * rng.normal(size=(n_cluster, self.d))
        spread = rng.normal(size=(self.n_spread, self.d))
        self.arms = np.vstack([cluster, spread])[rng.permutation(self.k)]
        self.theta = rng.normal(size=self.d) / np.sqrt(self.d)
        self.theta_user = self.context_effect * rng.normal(size=self.d_user)
        self._mu = self.arms @ self.theta

    @property
    def p(self) -> int:
        return self.d_user + self.d

    def bundle(self, rng: np.random.Generator, include_user_context: bool = True) -> tuple[ContextBundle, np.ndarray]:
        user = rng.normal(size=self.d_user)
        shown = user if include_user_context else np.zeros(self.d_user)
        arms = np.hstack([np.tile(shown, (self.k, 1)), self.arms])
        return ContextBundle(arms), user

    def expected_reward(self, arm: int, user: np.ndarray) -> float:
        return float(self._mu[arm] + user @ self.theta_user)

    def reward(self, arm: int, user: np.ndarray, rng: np.random.Generator) -> float:
        return self.expected_reward(arm, user) + self.sigma * float(rng.standard_normal())

    def normalized_gain(self, arm: int) -> float:
        """(mu_a - min mu) / (max mu - min mu), the per-round score in [0, 1]."""
        lo, hi = self._mu.min(), self._mu.max()
        return float((self._mu[arm] - lo) / (hi - lo))


def linear_run(world: LinearWorld, policy_cfg: dict[str, Any], seed: int, epochs: int,
               rounds_per_epoch: int = 100, include_user_context: bool = True) -> RunResult:
    """Curve = cumulative normalized gain over the full horizon, in [0, 1]."""
    policy = make_policy({**policy_cfg, "seed": [seed, 1]}, world.k, world.p)
    rng = np.random.default_rng([seed, 3])
    total = epochs * rounds_per_epoch
    metrics = [epoch_zero()]
    gain = 0.0
    for e in range(1, epochs + 1):
        counts = np.zeros(world.k)
        for _ in range(rounds_per_epoch):
            bundle, user = world.bundle(rng, include_user_context)
            dec = policy.select(bundle)
            policy.update(bundle, dec, world.reward(dec.arm_index, user, rng))
            gain += world.normalized_gain(dec.arm_index)
            counts[dec.arm_index] += 1
        metrics.append(EpochMetrics(e, 0, 0, gain / total, counts / rounds_per_epoch, rounds_per_epoch, 0))
    return RunResult(policy_label(policy_cfg), seed, metrics)


def estimation_error(world: LinearWorld, design: str, n_rounds: int = 200, seed: int = 0,
                     ridge: float = 1e-8, ridge_fit: float = 0.0) -> float:
    """||theta_hat - theta*|| after ``n_rounds`` exploration rounds on the item arms.

    The noise stream is shared across designs for a given seed, so paired
    comparisons differ only in which arms were sampled.
    """
    bundle = ContextBundle(world.arms)
    if design == "optimal":
        w = solve_d_optimal(bundle, SolverConfig(ridge=ridge)).weights
    elif design == "uniform":
        w = uniform_weights(world.k)
    else:
        raise ContractViolation(f"design must be 'optimal' or 'uniform', got {design!r}")
    arm_rng = np.random.default_rng([seed, 11])
    noise = world.sigma * np.random.default_rng([seed, 12]).standard_normal(n_rounds)
    picks = arm_rng.choice(world.k, size=n_rounds, p=w / w.sum())
    Phi = world.arms[picks]
    y = Phi @ world.theta + noise
    return float(np.linalg.norm(fit_arrays(Phi, y, ridge_fit).theta - world.theta))


# ---------------------------------------------------------------------------
# multi-run simulation


@dataclass
class SimConfig:
    epochs: int = 30
    runs: int = 5
    initial_fraction: float = 0.1
    policies: tuple[dict[str, Any], ...] = BASELINE_MENU
    recommenders: tuple[str, ...] = RECOMMENDER_NAMES
    features: FeatureMapConfig = field(default_factory=FeatureMapConfig)
    n_users: int | None = 500
    seed: int = 0
    world: str = "movielens"  # movielens | synthetic_movielens | linear
    data_path: str | None = None
    synthetic: dict[str, Any] = field(default_factory=dict)
    linear: dict[str, Any] = field(default_factory=dict)
    rounds_per_epoch: int = 100
    mf_params: dict[str, Any] = field(default_factory=dict)
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.runs < 1:
            raise ContractViolation("epochs and runs must be >= 1")
        if not 0.0 < self.initial_fraction < 1.0:
            raise ContractViolation("initial_fraction must lie in (0, 1)")
        if self.world not in ("movielens", "synthetic_movielens", "linear"):
            raise ContractViolation(f"unknown world {self.world!r}")
        if not self.policies:
            raise ContractViolation("at least one policy is required")
        labels = [policy_label(p) for p in self.policies]
        if len(set(labels)) != len(labels):
            raise ContractViolation(f"policy labels must be unique, got {labels}")
        self.policies = tuple(self.policies)
        self.recommenders = tuple(self.recommenders)

    @property
    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.runs)]


@dataclass
class CurveSet:
    label: str
    mean: np.ndarray
    std: np.ndarray
    traffic: np.ndarray  # epochs x arms, averaged over runs
    runs: list[RunResult]

    @property
    def curves(self) -> np.ndarray:
        return np.array([r.curve for r in self.runs])


@dataclass
class SimulationResult:
    config: SimConfig
    curves: dict[str, CurveSet]
    arm_names: tuple[str, ...]

    def summary(self) -> dict[str, Any]:
        return {
            "epochs": self.config.epochs,
            "seeds": self.config.seeds,
            "world": self.config.world,
            "arms": list(self.arm_names),
            "policies": {
                label: {"final_mean": float(c.mean[-1]), "final_std": float(c.std[-1]),
                        "mean": c.mean.tolist(), "std": c.std.tolist()}
                for label, c in self.curves.items()
            },
        }


def load_world_data(config: SimConfig) -> MovieLensData | None:
    if config.world == "linear":
        return None
    if config.world == "synthetic_movielens":
        data = make_synthetic_movielens(seed=config.seed, **config.synthetic)
    else:
        if not config.data_path:
            raise ContractViolation("world 'movielens' needs data_path")
        from .data import load_movielens
        data = load_movielens(config.data_path)
    if config.n_users:
        data = data.subsample_users(config.n_users, seed=config.seed)
    return data


def _one_run(args) -> RunResult:
    config, data, policy_cfg, seed, include_ctx = args
    label = policy_label(policy_cfg)
    try:
        if config.world == "linear":
            world = LinearWorld(seed=config.seed, **config.linear)
            return linear_run(world, policy_cfg, seed, config.epochs, config.rounds_per_epoch, include_ctx)
        fcfg = config.features if include_ctx else _without_context(config.features)
        return replay_run(data, policy_cfg, seed, config.epochs, config.initial_fraction, fcfg,
                          config.recommenders, config.mf_params or None)
    except Exception as exc:  # noqa: BLE001 - re-raised with the failing seed attached
        raise SimulationError(f"run failed for policy {label!r} with seed {seed}: {exc!r}", seed, label) from exc


def _without_context(fcfg: FeatureMapConfig) -> FeatureMapConfig:
    return FeatureMapConfig(fcfg.user_fields, fcfg.include_genres, fcfg.title_dims, include_user_context=False)


def _aggregate(label: str, runs: list[RunResult]) -> CurveSet:
    curves = np.array([r.curve for r in runs])
    traffic = np.mean([r.traffic for r in runs], axis=0)
    return CurveSet(label, curves.mean(axis=0), curves.std(axis=0), traffic, runs)


def run_simulation(config: SimConfig, data: MovieLensData | None = None, include_user_context: bool = True,
                   policies: Sequence[dict[str, Any]] | None = None) -> SimulationResult:
    """Mean and std curves per policy over the seeded runs."""
    if data is None:
        data = load_world_data(config)
    policies = tuple(policies or config.policies)
    jobs = [(config, data, p, s, include_user_context) for p in policies for s in config.seeds]
    if config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]
    out: dict[str, CurveSet] = {}
    for p in policies:
        label = policy_label(p)
        out[label] = _aggregate(label, [r for r in results if r.label == label])
    if config.world == "linear":
        arm_names = tuple(f"arm{i}" for i in range(LinearWorld(seed=config.seed, **config.linear).k))
    else:
        arm_names = config.recommenders
    return SimulationResult(config, out, arm_names)


@dataclass
class AblationResult:
    cells: dict[tuple[bool, str], SimulationResult]  # (user context, design) -> result
    context_diff: dict[str, np.ndarray]  # design -> with-context minus without, mean over paired runs
    design_diff: dict[bool, np.ndarray]  # user context -> optimal minus uniform
    pooled_std: dict[str, np.ndarray]


def ablation_suite(config: SimConfig, data: MovieLensData | None = None,
                   base_policy: dict[str, Any] | None = None) -> AblationResult:
    """{with, without user context} x {optimal, uniform design} under the same seeds."""
    if data is None:
        data = load_world_data(config)
    base = dict(base_policy or {"policy": "stagewise_freq", "params": {}})
    cells = {}
    for ctx in (True, False):
        for design in ("optimal", "uniform"):
            pol = {"policy": base["policy"], "label": f"{design}", "params": {**base.get("params", {}),
                                                                           "design": design}}
            cells[(ctx, design)] = run_simulation(config, data, include_user_context=ctx, policies=[pol])
    def curves(ctx, design):
        return cells[(ctx, design)].curves[design].curves
    context_diff, pooled = {}, {}
    for design in ("optimal", "uniform"):
        diff = curves(True, design) - curves(False, design)
        context_diff[design] = diff.mean(axis=0)
        pooled[design] = np.sqrt(0.5 * (curves(True, design).var(axis=0) + curves(False, design).var(axis=0)))
    design_diff = {ctx: (curves(ctx, "optimal") - curves(ctx, "uniform")).mean(axis=0) for ctx in (True, False)}
    return AblationResult(cells, context_diff, design_diff, pooled)


# ---------------------------------------------------------------------------
# output


def write_curves_csv(result: SimulationResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "policy", "mean", "std"])
        for label, c in result.curves.items():
            for e, (m, s) in enumerate(zip(c.mean, c.std)):
                w.writerow([e, label, repr(float(m)), repr(float(s))])
    return path


def write_traffic_csv(curve: CurveSet, arm_names: Sequence[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "arm", "share"])
        for e, shares in enumerate(curve.traffic, start=1):
            for name, s in zip(arm_names, shares):
                w.writerow([e, name, repr(float(s))])
    return path


def write_diff_csv(diffs: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "comparison", "difference"])
        for name, d in diffs.items():
            for e, v in enumerate(d):
                w.writerow([e, name, repr(float(v))])
    return path


def write_outputs(result: SimulationResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_curves_csv(result, out / "recall_curves.csv")]
    for label, c in result.curves.items():
        single = SimulationResult(result.config, {label: c}, result.arm_names)
        paths.append(write_curves_csv(single, out / f"curve_{label}.csv"))
        paths.append(write_traffic_csv(c, result.arm_names, out / f"traffic_{label}.csv"))
    summary = out / "summary.json"
    summary.write_text(json.dumps(result.summary(), indent=2))
    paths.append(summary)
    return paths


def write_ablation(ab: AblationResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for (ctx, design), res in ab.cells.items():
        cell = out / f"ablation_{'context' if ctx else 'nocontext'}_{design}.csv"
        paths.append(write_curves_csv(res, cell))
    diffs = {f"context_minus_nocontext[{d}]": v for d, v in ab.context_diff.items()}
    diffs |= {f"optimal_minus_uniform[{'context' if c else 'nocontext'}]": v for c, v in ab.design_diff.items()}
    paths.append(write_diff_csv(diffs, out / "ablation_differences.csv"))
    return paths
