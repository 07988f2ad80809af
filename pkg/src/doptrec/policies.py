"""Arm-selection policies.

Stateless selection functions act on immutable snapshots (arm statistics,
fitted models, posteriors) and return a ``Decision`` with the propensity of the
chosen arm.  Policy classes wrap them with the bookkeeping needed to run inside
the replay simulator or the service: ``select(bundle)`` then
``update(bundle, decision, reward)``.

The stage-wise policies alternate ``n_explore`` exploration rounds, a refit,
and ``n_exploit`` exploitation rounds.  Exploration samples arms from the
D-optimal design of the current bundle (or uniformly), exploitation acts
greedily on the refit model or by Thompson sampling from the posterior.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .design import ContextBundle, SolverConfig, solve_bayesian, solve_d_optimal
from .errors import ContractViolation, SingularDesignError, SingularFitError
from .models import (
    DEFAULT_NOISE_VAR,
    GaussianPosterior,
    LinearModelState,
    ObservationRecord,
    RewardModelSpec,
    fit_arrays,
    linearize,
    posterior_update_arrays,
    predict_all,
    sample_theta,
)

log = logging.getLogger(__name__)

DEFAULT_MC_SAMPLES = 1000


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class ArmStats:
    """Per-arm running totals for context-free policies."""

    q: np.ndarray
    n: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=float)
        self.n = np.asarray(self.n, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        k = self.q.shape[0]
        if any(a.shape != (k,) for a in (self.n, self.alpha, self.beta)):
            raise ContractViolation("ArmStats arrays must share shape (k,)")
        if k < 2:
            raise ContractViolation("need at least 2 arms")
        if np.any(self.n < 0) or np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ContractViolation("ArmStats needs n >= 0 and alpha, beta > 0")

    @property
    def k(self) -> int:
        return self.q.shape[0]

    @classmethod
    def fresh(cls, k: int, alpha0: float = 1.0, beta0: float = 1.0) -> "ArmStats":
        return cls(np.zeros(k), np.zeros(k), np.full(k, float(alpha0)), np.full(k, float(beta0)))

    @classmethod
    def from_means(cls, means: Sequence[float], counts: Sequence[float]) -> "ArmStats":
        counts = np.asarray(counts, dtype=float)
        return cls(np.asarray(means, dtype=float) * counts, counts, np.ones(len(counts)), np.ones(len(counts)))

    def record(self, arm: int, reward: float) -> None:
        self.q[arm] += reward
        self.n[arm] += 1
        self.alpha[arm] += reward
        self.beta[arm] += 1.0 - reward

    def means(self) -> np.ndarray:
        """q / n with unpulled arms at +inf."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.n > 0, self.q / np.maximum(self.n, 1), np.inf)


@dataclass(frozen=True)
class Decision:
    arm_index: int
    propensity: float
    mode: str
    policy_id: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not (0.0 < self.propensity <= 1.0):
            raise ContractViolation(f"propensity must lie in (0, 1], got {self.propensity}")
        if self.mode not in ("explore", "exploit"):
            raise ContractViolation(f"mode must be explore or exploit, got {self.mode!r}")


def _argmax(scores: np.ndarray) -> int:
    # np.argmax returns the first maximum, which is the lowest-index tie-break
    return int(np.argmax(scores))


def _mc_propensity(freq_hits: np.ndarray, arm: int, n_mc: int) -> float:
    """Monte-Carlo choice probability of ``arm``, floored so it stays positive."""
    return float(max(freq_hits[arm] / n_mc, 1.0 / (n_mc + 1)))


# ---------------------------------------------------------------------------
# selection functions


def epsilon_greedy_select(stats: ArmStats, epsilon: float, rng_seed=None, policy_id: str = "eps_greedy") -> Decision:
    if not (0.0 <= epsilon <= 1.0):
        raise ContractViolation(f"epsilon must lie in [0, 1], got {epsilon}")
    rng = _rng(rng_seed)
    greedy = _argmax(stats.means())
    explore = rng.random() < epsilon
    arm = int(rng.integers(stats.k)) if explore else greedy
    prop = epsilon / stats.k + (1.0 - epsilon) * (arm == greedy)
    return Decision(arm, prop, "explore" if explore else "exploit", policy_id)


def ucb_select(stats: ArmStats, delta: float, policy_id: str = "ucb") -> Decision:
    if not (0.0 < delta < 1.0):
        raise ContractViolation(f"delta must lie in (0, 1), got {delta}")
    unpulled = np.flatnonzero(stats.n == 0)
    if unpulled.size:
        return Decision(int(unpulled[0]), 1.0, "explore", policy_id)
    return Decision(_argmax(ucb_scores(stats, delta)), 1.0, "exploit", policy_id)


def ucb_scores(stats: ArmStats, delta: float) -> np.ndarray:
    return stats.q / stats.n + np.sqrt(math.log(1.0 / delta) / stats.n)


def beta_thompson_select(stats: ArmStats, rng_seed=None, n_mc: int = DEFAULT_MC_SAMPLES,
                         policy_id: str = "beta_ts") -> Decision:
    """Sample one Beta draw per arm and take the argmax.

    The propensity is estimated from ``n_mc`` further draws taken from a
    generator forked off the main one, so it is independent of the choice.
    """
    rng = _rng(rng_seed)
    arm = _argmax(rng.beta(stats.alpha, stats.beta))
    mc_rng = np.random.default_rng(rng.integers(2**63))
    draws = mc_rng.beta(stats.alpha, stats.beta, size=(n_mc, stats.k))
    hits = np.bincount(np.argmax(draws, axis=1), minlength=stats.k)
    return Decision(arm, _mc_propensity(hits, arm, n_mc), "exploit", policy_id)


def linucb_scores(model: LinearModelState, bundle: ContextBundle, alpha_ucb: float) -> np.ndarray:
    A = model.regularized_gram()
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise SingularFitError("LinUCB covariance is singular; use ridge_fit > 0") from None
    if np.min(np.abs(np.diag(L))) <= 1e-12:
        raise SingularFitError("LinUCB covariance is singular; use ridge_fit > 0")
    W = np.linalg.solve(L, bundle.arms.T)
    width = np.sqrt(np.sum(W * W, axis=0))
    return bundle.arms @ model.theta + alpha_ucb * width


def linucb_select(model: LinearModelState, bundle: ContextBundle, alpha_ucb: float,
                  policy_id: str = "linucb") -> Decision:
    return Decision(_argmax(linucb_scores(model, bundle, alpha_ucb)), 1.0, "exploit", policy_id)


def _score_sqrt_cov(posterior: GaussianPosterior, arms: np.ndarray) -> np.ndarray:
    S = arms @ posterior.covariance @ arms.T
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def linear_thompson_select(posterior: GaussianPosterior, bundle: ContextBundle, rng_seed=None,
                           n_mc: int = DEFAULT_MC_SAMPLES, mode: str = "exploit",
                           policy_id: str = "lin_ts") -> Decision:
    """Draw theta from the posterior and take the argmax arm.

    Arm scores under the posterior are jointly Gaussian, N(A mean, A cov A^T),
    so the propensity is estimated by sampling that k-dimensional law.
    """
    rng = _rng(rng_seed)
    theta = sample_theta(posterior, rng)
    arm = _argmax(bundle.arms @ theta)
    mc_rng = np.random.default_rng(rng.integers(2**63))
    mu = bundle.arms @ posterior.mean
    R = _score_sqrt_cov(posterior, bundle.arms)
    scores = mu + mc_rng.standard_normal((n_mc, bundle.k)) @ R.T
    hits = np.bincount(np.argmax(scores, axis=1), minlength=bundle.k)
    return Decision(arm, _mc_propensity(hits, arm, n_mc), mode, policy_id)


def exploit_select(model: LinearModelState, spec: RewardModelSpec, bundle: ContextBundle,
                   policy_id: str = "exploit") -> Decision:
    # the sigmoid is monotone but saturates in floating point, so rank by its argument
    scores = bundle.arms @ model.theta if spec.kind == "logistic" else predict_all(spec, model.theta, bundle)
    return Decision(_argmax(scores), 1.0, "exploit", policy_id)


def sample_from_design(weights: np.ndarray, rng_seed=None, policy_id: str = "", flags=()) -> Decision:
    rng = _rng(rng_seed)
    w = np.clip(np.asarray(weights, dtype=float), 0.0, None)
    w = w / w.sum()
    arm = int(rng.choice(w.shape[0], p=w))
    return Decision(arm, float(w[arm]), "explore", policy_id, tuple(flags))


# ---------------------------------------------------------------------------
# stage controller


def never_restart(history) -> bool:
    return False


@dataclass(frozen=True)
class StageConfig:
    n_explore: int = 100
    n_exploit: int = 400
    horizon: int = 10**12
    restart_hook: Callable[[Any], bool] = never_restart
    design_refresh: int | None = None

    def __post_init__(self) -> None:
        if self.n_explore < 1:
            raise ContractViolation("n_explore must be >= 1")
        if self.n_exploit < 0:
            raise ContractViolation("n_exploit must be >= 0")
        if self.horizon < self.n_explore:
            raise ContractViolation("horizon must be >= n_explore")
        if self.design_refresh is not None and self.design_refresh < 1:
            raise ContractViolation("design_refresh must be >= 1")

    @property
    def refresh(self) -> int:
        return self.n_explore if self.design_refresh is None else self.design_refresh


EXPLORE, EXPLOIT, REFIT, RESTART, DONE = "explore", "exploit", "refit", "restart", "done"


class StageController:
    """Emits the explore x n1, refit, exploit x n2 cycle until ``horizon`` rounds.

    ``advance(history)`` returns the next event.  Explore and exploit events
    are rounds; refit and restart are bookkeeping events between rounds.  The
    restart hook is consulted at the start of each cycle.
    """

    def __init__(self, stage: StageConfig):
        self.stage = stage
        self.rounds = 0
        self.cycle = 0
        self._pos = 0  # position within the current cycle, counted in events
        self._checked_restart = False

    def _cycle_events(self) -> int:
        return self.stage.n_explore + 1 + self.stage.n_exploit

    def advance(self, history=None) -> str:
        if self.rounds >= self.stage.horizon:
            return DONE
        if self._pos == 0 and not self._checked_restart:
            self._checked_restart = True
            if self.stage.restart_hook(history):
                return RESTART
        n1 = self.stage.n_explore
        pos = self._pos
        self._pos += 1
        if self._pos == self._cycle_events():
            self._pos = 0
            self.cycle += 1
            self._checked_restart = False
        if pos < n1:
            self.rounds += 1
            return EXPLORE
        if pos == n1:
            return REFIT
        self.rounds += 1
        return EXPLOIT

    @property
    def explore_index(self) -> int:
        """Index of the most recent explore round within its phase."""
        return (self._pos - 1) % self._cycle_events()


def mode_sequence(stage: StageConfig) -> list[str]:
    """The full event list with the compact letters E, F, X, R."""
    letters = {EXPLORE: "E", EXPLOIT: "X", REFIT: "F", RESTART: "R"}
    ctl = StageController(stage)
    out = []
    while (ev := ctl.advance(None)) != DONE:
        out.append(letters[ev])
    return out


# ---------------------------------------------------------------------------
# policy objects


class Policy:
    """Common interface: ``select`` a decision, then ``update`` with the reward."""

    policy_id = "policy"

    def select(self, bundle: ContextBundle) -> Decision:
        raise NotImplementedError

    def update(self, bundle: ContextBundle, decision: Decision, reward: float) -> None:
        raise NotImplementedError


class UniformPolicy(Policy):
    policy_id = "uniform"

    def __init__(self, k: int, d: int, seed=None):
        self.rng = _rng(seed)

    def select(self, bundle):
        return Decision(int(self.rng.integers(bundle.k)), 1.0 / bundle.k, "explore", self.policy_id)

    def update(self, bundle, decision, reward):
        pass


class EpsilonGreedyPolicy(Policy):
    policy_id = "eps_greedy"

    def __init__(self, k: int, d: int, seed=None, epsilon: float = 0.1):
        self.stats = ArmStats.fresh(k)
        self.epsilon = epsilon
        self.rng = _rng(seed)

    def select(self, bundle):
        return epsilon_greedy_select(self.stats, self.epsilon, self.rng, self.policy_id)

    def update(self, bundle, decision, reward):
        self.stats.record(decision.arm_index, reward)


class UCBPolicy(Policy):
    policy_id = "ucb"

    def __init__(self, k: int, d: int, seed=None, delta: float = 0.1):
        self.stats = ArmStats.fresh(k)
        self.delta = delta

    def select(self, bundle):
        return ucb_select(self.stats, self.delta, self.policy_id)

    def update(self, bundle, decision, reward):
        self.stats.record(decision.arm_index, reward)


class BetaThompsonPolicy(Policy):
    policy_id = "beta_ts"

    def __init__(self, k: int, d: int, seed=None, alpha0: float = 1.0, beta0: float = 1.0,
                 n_mc: int = DEFAULT_MC_SAMPLES):
        self.stats = ArmStats.fresh(k, alpha0, beta0)
        self.rng = _rng(seed)
        self.n_mc = n_mc

    def select(self, bundle):
        return beta_thompson_select(self.stats, self.rng, self.n_mc, self.policy_id)

    def update(self, bundle, decision, reward):
        self.stats.record(decision.arm_index, reward)


class LinUCBPolicy(Policy):
    """Per-round ridge refit, the classical LinUCB baseline."""

    policy_id = "linucb"

    def __init__(self, k: int, d: int, seed=None, alpha_ucb: float = 1.0, ridge_fit: float = 1.0):
        self.model = LinearModelState.empty(d, ridge_fit)
        self.alpha_ucb = alpha_ucb

    def select(self, bundle):
        return linucb_select(self.model, bundle, self.alpha_ucb, self.policy_id)

    def update(self, bundle, decision, reward):
        self.model = self.model.update(bundle.arms[decision.arm_index], [reward])


class LinearThompsonPolicy(Policy):
    """Per-round conjugate update and one posterior draw per round."""

    policy_id = "lin_ts"

    def __init__(self, k: int, d: int, seed=None, prior_var: float = 1.0,
                 noise_var: float = DEFAULT_NOISE_VAR, n_mc: int = DEFAULT_MC_SAMPLES):
        self.posterior = GaussianPosterior.isotropic(d, prior_var, noise_var)
        self.rng = _rng(seed)
        self.n_mc = n_mc

    def select(self, bundle):
        return linear_thompson_select(self.posterior, bundle, self.rng, self.n_mc, policy_id=self.policy_id)

    def update(self, bundle, decision, reward):
        self.posterior = posterior_update_arrays(self.posterior, bundle.arms[decision.arm_index], [reward])


class StagewisePolicy(Policy):
    """Stage-wise explore/refit/exploit driven by a ``StageController``.

    design="optimal" samples exploration arms from the D-optimal design of the
    current bundle (re-solved every ``design_refresh`` explore rounds);
    design="uniform" samples 1/k, which is epoch-greedy.  A solver failure
    falls back to uniform exploration for the rest of the phase and is flagged
    on the decisions and in the log.
    """

    bayesian = False

    def __init__(self, k: int, d: int, seed=None, n_explore: int = 100, n_exploit: int = 400,
                 horizon: int = 10**12, design: str = "optimal", design_refresh: int | None = None,
                 ridge: float = 1e-6, epsilon: float = 1e-3, ridge_fit: float = 1.0,
                 model: str = "linear", exclude_exploit: bool = False,
                 restart_hook: Callable[[Any], bool] = never_restart, policy_id: str | None = None):
        if design not in ("optimal", "uniform"):
            raise ContractViolation(f"design must be 'optimal' or 'uniform', got {design!r}")
        self.k, self.d = k, d
        self.rng = _rng(seed)
        self.stage = StageConfig(n_explore, n_exploit, horizon, restart_hook, design_refresh)
        self.controller = StageController(self.stage)
        self.design = design
        self.solver = SolverConfig(epsilon=epsilon, ridge=ridge)
        self.ridge_fit = ridge_fit
        self.spec = RewardModelSpec.from_name(model)
        self.exclude_exploit = exclude_exploit
        if policy_id is not None:
            self.policy_id = policy_id
        self.history: list[ObservationRecord] = []
        self._fit_rows: list[int] = []  # indices of history rows used for fitting
        self._weights: np.ndarray | None = None
        self._phase_fallback = False
        self._explore_count = 0
        self.fallback_events = 0
        self.model = LinearModelState.empty(d, ridge_fit)
        self._init_posterior()

    def _init_posterior(self) -> None:
        pass

    # -- design ------------------------------------------------------------
    def _solve(self, bundle: ContextBundle) -> np.ndarray:
        lin = linearize(self.spec, self.model.theta, bundle)
        return solve_d_optimal(lin, self.solver).weights

    def _explore(self, bundle: ContextBundle) -> Decision:
        if self.design == "uniform":
            return Decision(int(self.rng.integers(bundle.k)), 1.0 / bundle.k, "explore", self.policy_id)
        if self._explore_count % self.stage.refresh == 0 and not self._phase_fallback:
            try:
                self._weights = self._solve(bundle)
            except (SingularDesignError, np.linalg.LinAlgError) as exc:
                self._phase_fallback = True
                self.fallback_events += 1
                log.warning("%s: design solver failed (%s); uniform exploration for this phase",
                            self.policy_id, exc)
        self._explore_count += 1
        if self._phase_fallback or self._weights is None:
            return Decision(int(self.rng.integers(bundle.k)), 1.0 / bundle.k, "explore", self.policy_id,
                            ("design_fallback",))
        return sample_from_design(self._weights, self.rng, self.policy_id)

    # -- fitting -----------------------------------------------------------
    def _fit_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._fit_rows:
            return np.zeros((0, self.d)), np.zeros(0)
        rows = [self.history[i] for i in self._fit_rows]
        return np.vstack([r.features for r in rows]), np.array([r.reward for r in rows])

    def _refit(self) -> None:
        Phi, y = self._fit_arrays()
        if Phi.shape[0]:
            try:
                self.model = fit_arrays(Phi, y, self.ridge_fit)
            except SingularFitError as exc:
                log.warning("%s: refit skipped (%s)", self.policy_id, exc)

    def _exploit(self, bundle: ContextBundle) -> Decision:
        return exploit_select(self.model, self.spec, bundle, self.policy_id)

    def _restart(self) -> None:
        self.history.clear()
        self._fit_rows.clear()
        self.model = LinearModelState.empty(self.d, self.ridge_fit)
        self._init_posterior()

    # -- interface ---------------------------------------------------------
    def select(self, bundle: ContextBundle) -> Decision:
        while True:
            ev = self.controller.advance(self.history)
            if ev == RESTART:
                self._restart()
            elif ev == REFIT:
                self._refit()
                self._explore_count = 0
                self._phase_fallback = False
            elif ev == EXPLORE:
                return self._explore(bundle)
            elif ev == EXPLOIT:
                return self._exploit(bundle)
            else:
                raise ContractViolation("stage horizon exhausted")

    def update(self, bundle: ContextBundle, decision: Decision, reward: float) -> None:
        rec = ObservationRecord(len(self.history), bundle.arms[decision.arm_index], decision.arm_index,
                                decision.propensity, reward)
        self.history.append(rec)
        if decision.mode == "explore" or not self.exclude_exploit:
            self._fit_rows.append(len(self.history) - 1)


class StagewiseFrequentistPolicy(StagewisePolicy):
    policy_id = "stagewise_freq"


class StagewiseBayesPolicy(StagewisePolicy):
    """Bayesian variant: history-informed design, posterior refit, Thompson exploitation.

    The design prior uses the features of earlier exploration rounds scaled by
    ``lambda_prior`` (default 1 / n_explore, so one phase of history weighs as
    much as the design itself).
    """

    policy_id = "stagewise_bayes"
    bayesian = True

    def __init__(self, k: int, d: int, seed=None, lambda_prior: float | None = None,
                 prior_var: float = 1.0, noise_var: float = DEFAULT_NOISE_VAR,
                 n_mc: int = DEFAULT_MC_SAMPLES, **kw):
        self.prior_var = prior_var
        self.noise_var = noise_var
        self.n_mc = n_mc
        self._explore_rows: list[int] = []
        kw.pop("model", None)
        super().__init__(k, d, seed, **kw)
        self.lambda_prior = 1.0 / self.stage.n_explore if lambda_prior is None else lambda_prior
        self.solver = SolverConfig(epsilon=self.solver.epsilon, ridge=self.solver.ridge,
                                   lambda_prior=self.lambda_prior)

    def _init_posterior(self) -> None:
        self.posterior = GaussianPosterior.isotropic(self.d, self.prior_var, self.noise_var)

    def _solve(self, bundle):
        feats = [self.history[i].features for i in self._explore_rows]
        H = np.vstack(feats) if feats else np.zeros((0, self.d))
        return solve_bayesian(bundle, H, self.solver).weights

    def _refit(self):
        Phi, y = self._fit_arrays()
        prior = GaussianPosterior.isotropic(self.d, self.prior_var, self.noise_var)
        self.posterior = posterior_update_arrays(prior, Phi, y)

    def _exploit(self, bundle):
        return linear_thompson_select(self.posterior, bundle, self.rng, self.n_mc, policy_id=self.policy_id)

    def _restart(self):
        super()._restart()
        self._explore_rows.clear()

    def update(self, bundle, decision, reward):
        super().update(bundle, decision, reward)
        if decision.mode == "explore":
            self._explore_rows.append(len(self.history) - 1)


POLICIES: dict[str, Callable[..., Policy]] = {
    "uniform": UniformPolicy,
    "eps_greedy": EpsilonGreedyPolicy,
    "ucb": UCBPolicy,
    "beta_ts": BetaThompsonPolicy,
    "linucb": LinUCBPolicy,
    "lin_ts": LinearThompsonPolicy,
    "stagewise_freq": StagewiseFrequentistPolicy,
    "stagewise_bayes": StagewiseBayesPolicy,
}


def make_policy(config: dict[str, Any], k: int, d: int) -> Policy:
    """Build a policy from ``{"policy": name, "params": {...}, "seed": int}``."""
    name = config.get("policy")
    if name == "epoch_greedy":
        params = {"design": "uniform", **config.get("params", {})}
        pol = StagewiseFrequentistPolicy(k, d, config.get("seed"), policy_id="epoch_greedy", **params)
        return pol
    if name not in POLICIES:
        raise ContractViolation(f"unknown policy {name!r}; choose from {sorted(POLICIES) + ['epoch_greedy']}")
    try:
        return POLICIES[name](k, d, config.get("seed"), **config.get("params", {}))
    except TypeError as exc:
        raise ContractViolation(f"bad parameters for policy {name!r}: {exc}") from None
