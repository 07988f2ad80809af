"""Reward models: linear and nonlinear predictors, ridge fits, conjugate posteriors.

Frequentist fits keep the sufficient statistics ``gram = Phi^T Phi`` and
``xty = Phi^T y`` so they can be extended incrementally.  The Bayesian side is
the linear-Gaussian conjugate model, updated in precision form.  Nonlinear
models enter the design solver through ``linearize``, which replaces each arm's
features by the gradient of the predictor at a reference parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.special import expit

from .design import ContextBundle
from .errors import ContractViolation, InputError, SingularFitError

DEFAULT_NOISE_VAR = 0.25

ValueFn = Callable[[np.ndarray, np.ndarray], float]
GradFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _vector(x, name: str, d: int | None = None) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise ContractViolation(f"{name} must be a vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise ContractViolation(f"{name} has length {v.shape[0]}, expected {d}")
    return v


# ---------------------------------------------------------------------------
# model specs


def _linear_value(theta: np.ndarray, phi: np.ndarray) -> float:
    return float(theta @ phi)


def _linear_grad(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.array(phi, dtype=float)


def _logistic_value(theta: np.ndarray, phi: np.ndarray) -> float:
    return float(expit(theta @ phi))


def _logistic_grad(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    s = expit(theta @ phi)
    return s * (1.0 - s) * np.asarray(phi, dtype=float)


@dataclass(frozen=True)
class RewardModelSpec:
    """A reward predictor f_theta(phi) together with its gradient in theta."""

    kind: str
    value: ValueFn
    gradient: GradFn

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "logistic", "custom"):
            raise ContractViolation(f"unknown model kind {self.kind!r}")

    @classmethod
    def linear(cls) -> "RewardModelSpec":
        return cls("linear", _linear_value, _linear_grad)

    @classmethod
    def logistic(cls) -> "RewardModelSpec":
        return cls("logistic", _logistic_value, _logistic_grad)

    @classmethod
    def custom(cls, value: ValueFn, gradient: GradFn) -> "RewardModelSpec":
        return cls("custom", value, gradient)

    @classmethod
    def from_name(cls, name: str) -> "RewardModelSpec":
        if name == "linear":
            return cls.linear()
        if name == "logistic":
            return cls.logistic()
        raise ContractViolation(f"model kind {name!r} cannot be built by name")


def predict(spec: RewardModelSpec, theta, features) -> float:
    theta = _vector(theta, "theta")
    phi = _vector(features, "features", theta.shape[0])
    return float(spec.value(theta, phi))


def predict_all(spec: RewardModelSpec, theta, bundle: ContextBundle) -> np.ndarray:
    """Scores for every arm of a bundle."""
    theta = _vector(theta, "theta", bundle.d)
    z = bundle.arms @ theta
    if spec.kind == "linear":
        return z
    if spec.kind == "logistic":
        return expit(z)
    return np.array([spec.value(theta, phi) for phi in bundle.arms])


def linearize(spec: RewardModelSpec, theta0, bundle: ContextBundle) -> ContextBundle:
    """Replace each arm by the predictor's gradient at ``theta0``."""
    theta0 = _vector(theta0, "theta0", bundle.d)
    if spec.kind == "linear":
        return bundle
    if spec.kind == "logistic":
        s = expit(bundle.arms @ theta0)
        eta = (s * (1.0 - s))[:, None] * bundle.arms
    else:
        eta = np.array([np.asarray(spec.gradient(theta0, phi), dtype=float) for phi in bundle.arms])
        if eta.shape != bundle.arms.shape:
            raise ContractViolation(f"gradient returned shape {eta.shape[1:]}, expected ({bundle.d},)")
    if not np.all(np.isfinite(eta)):
        raise InputError("reward-model gradient is not finite at theta0")
    return ContextBundle(eta, round_id=bundle.round_id)


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class ObservationRecord:
    """One logged interaction."""

    round_id: int
    features: np.ndarray
    arm_index: int
    propensity: float
    reward: float

    def __post_init__(self) -> None:
        f = np.array(self.features, dtype=float, copy=True)
        if f.ndim != 1:
            raise ContractViolation("features must be a vector")
        if not np.all(np.isfinite(f)):
            raise InputError("observation features contain non-finite entries")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)
        if not (0.0 < self.propensity <= 1.0):
            raise ContractViolation(f"propensity must lie in (0, 1], got {self.propensity}")
        if self.arm_index < 0:
            raise ContractViolation(f"arm_index must be >= 0, got {self.arm_index}")
        if not np.isfinite(self.reward):
            raise InputError(f"reward must be finite, got {self.reward}")

    def to_json(self) -> dict[str, Any]:
        return {"round": int(self.round_id), "features": self.features.tolist(),
                "arm": int(self.arm_index), "propensity": float(self.propensity),
                "reward": float(self.reward)}

    def to_json_line(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, doc: dict[str, Any] | str) -> "ObservationRecord":
        if isinstance(doc, str):
            doc = json.loads(doc)
        try:
            return cls(int(doc["round"]), doc["features"], int(doc["arm"]),
                       float(doc["propensity"]), float(doc["reward"]))
        except KeyError as exc:
            raise ContractViolation(f"observation record missing field {exc}") from None


def history_arrays(history: Iterable[ObservationRecord], d: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack a history into (Phi, y)."""
    rows = list(history)
    if not rows:
        return np.zeros((0, d or 0)), np.zeros(0)
    Phi = np.vstack([r.features for r in rows])
    if d is not None and Phi.shape[1] != d:
        raise ContractViolation(f"history features have dimension {Phi.shape[1]}, expected {d}")
    return Phi, np.array([r.reward for r in rows])


# ---------------------------------------------------------------------------
# frequentist fit


@dataclass(frozen=True)
class LinearModelState:
    """Ridge least-squares fit with its sufficient statistics."""

    theta: np.ndarray
    gram: np.ndarray
    xty: np.ndarray
    n_obs: int
    ridge_fit: float = 0.0

    @property
    def d(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def empty(cls, d: int, ridge_fit: float = 1.0) -> "LinearModelState":
        """Unfitted state: theta = 0, no data."""
        if ridge_fit <= 0:
            raise ContractViolation("an empty model needs ridge_fit > 0")
        return cls(np.zeros(d), np.zeros((d, d)), np.zeros(d), 0, ridge_fit)

    def regularized_gram(self) -> np.ndarray:
        return self.gram + self.ridge_fit * np.eye(self.d)

    def update(self, Phi, y) -> "LinearModelState":
        """New state including extra rows; the current one is untouched."""
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if Phi.shape[0] == 0:
            return self
        return _solve_state(self.gram + Phi.T @ Phi, self.xty + Phi.T @ y,
                            self.n_obs + Phi.shape[0], self.ridge_fit)

    def to_snapshot(self, version: int) -> dict[str, Any]:
        return {"version": int(version), "theta": self.theta.tolist()}


def _solve_state(gram: np.ndarray, xty: np.ndarray, n_obs: int, ridge_fit: float) -> LinearModelState:
    d = gram.shape[0]
    A = gram + ridge_fit * np.eye(d)
    try:
        c = sla.cho_factor(A, lower=True, check_finite=False)
    except sla.LinAlgError:
        raise SingularFitError(
            f"normal equations are singular (rank {np.linalg.matrix_rank(gram)} < {d}); use ridge_fit > 0") from None
    diag = np.abs(np.diag(c[0]))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise SingularFitError(
            f"normal equations are singular (rank {np.linalg.matrix_rank(gram)} < {d}); use ridge_fit > 0")
    theta = sla.cho_solve(c, xty, check_finite=False)
    return LinearModelState(theta, gram, xty, int(n_obs), float(ridge_fit))


def fit_arrays(Phi, y, ridge_fit: float = 0.0) -> LinearModelState:
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if Phi.shape[0] == 0:
        raise ContractViolation("history must be nonempty")
    if Phi.shape[0] != y.shape[0]:
        raise ContractViolation(f"{Phi.shape[0]} feature rows but {y.shape[0]} rewards")
    if ridge_fit < 0:
        raise ContractViolation("ridge_fit must be >= 0")
    return _solve_state(Phi.T @ Phi, Phi.T @ y, Phi.shape[0], ridge_fit)


def fit_erm(history: Sequence[ObservationRecord], ridge_fit: float = 0.0) -> LinearModelState:
    """theta = (Phi^T Phi + ridge_fit I)^{-1} Phi^T y."""
    if not history:
        raise ContractViolation("history must be nonempty")
    Phi, y = history_arrays(history)
    return fit_arrays(Phi, y, ridge_fit)


# ---------------------------------------------------------------------------
# Bayesian posterior


def _chol(cov: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ContractViolation(f"{what} is not positive definite") from None


@dataclass(frozen=True)
class GaussianPosterior:
    """theta ~ N(mean, covariance) under Gaussian reward noise of variance noise_var."""

    mean: np.ndarray
    covariance: np.ndarray
    noise_var: float = DEFAULT_NOISE_VAR

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.covariance, dtype=float)
        d = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (d, d):
            raise ContractViolation(f"mean shape {mean.shape} and covariance shape {cov.shape} disagree")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
            raise ContractViolation("covariance must be symmetric")
        if not self.noise_var > 0:
            raise ContractViolation("noise_var must be > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def isotropic(cls, d: int, variance: float = 1.0, noise_var: float = DEFAULT_NOISE_VAR) -> "GaussianPosterior":
        return cls(np.zeros(d), variance * np.eye(d), noise_var)

    def to_snapshot(self, version: int) -> dict[str, Any]:
        return {"version": int(version), "mean": self.mean.tolist(),
                "cov": self.covariance.tolist(), "noise_var": float(self.noise_var)}


def load_snapshot(doc: dict[str, Any] | str) -> tuple[int, LinearModelState | GaussianPosterior]:
    """Inverse of ``to_snapshot``; a theta-only snapshot has no statistics attached."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    version = int(doc.get("version", 0))
    if "theta" in doc:
        theta = np.asarray(doc["theta"], dtype=float)
        d = theta.shape[0]
        return version, LinearModelState(theta, np.zeros((d, d)), np.zeros(d), 0, 0.0)
    if "mean" in doc:
        return version, GaussianPosterior(doc["mean"], doc["cov"], float(doc["noise_var"]))
    raise ContractViolation("snapshot has neither 'theta' nor 'mean'")


def posterior_update_arrays(prior: GaussianPosterior, Phi, y) -> GaussianPosterior:
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    L = _chol(prior.covariance, "prior covariance")
    if Phi.shape[0] == 0:
        return prior
    if Phi.shape[1] != prior.d:
        raise ContractViolation(f"features have dimension {Phi.shape[1]}, expected {prior.d}")
    if Phi.shape[0] == 1:
        # rank-one Sherman-Morrison form of the same update
        x = Phi[0]
        cx = prior.covariance @ x
        denom = prior.noise_var + x @ cx
        mean = prior.mean + cx * ((y[0] - x @ prior.mean) / denom)
        cov = prior.covariance - np.outer(cx, cx) / denom
        return GaussianPosterior(mean, 0.5 * (cov + cov.T), prior.noise_var)
    prior_prec = sla.cho_solve((L, True), np.eye(prior.d))
    prec = prior_prec + Phi.T @ Phi / prior.noise_var
    rhs = prior_prec @ prior.mean + Phi.T @ y / prior.noise_var
    Lp = _chol(0.5 * (prec + prec.T), "posterior precision")
    cov = sla.cho_solve((Lp, True), np.eye(prior.d))
    cov = 0.5 * (cov + cov.T)
    return GaussianPosterior(sla.cho_solve((Lp, True), rhs), cov, prior.noise_var)


def posterior_update(prior: GaussianPosterior, batch: Sequence[ObservationRecord]) -> GaussianPosterior:
    """Conjugate update; covariance_new = (covariance^{-1} + Phi^T Phi / noise_var)^{-1}."""
    Phi, y = history_arrays(batch, prior.d)
    return posterior_update_arrays(prior, Phi, y)


def sample_theta(posterior: GaussianPosterior, rng_seed: int | np.random.Generator | None = None) -> np.ndarray:
    """mean + L z with L L^T = covariance and z ~ N(0, I) from the seeded generator."""
    L = _chol(posterior.covariance, "posterior covariance")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return posterior.mean + L @ rng.standard_normal(posterior.d)
