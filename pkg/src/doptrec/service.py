"""HTTP bandit service: select, delayed reward matching, batch refits.

``BanditService`` holds the state and is framework independent; ``create_app``
exposes it over FastAPI.  Reads go against an immutable ``Snapshot`` that a
retrain replaces by a single reference swap, so a request sees exactly one
(model_version, weights) pair.  Mutations of the stage controller, pending
tickets and the log happen under one lock.

The JSON-lines log is the source of truth.  It holds three event kinds:

* ``decision``: a ticket was issued (with the per-arm features),
* ``observation``: an ObservationRecord plus ``imputed`` and ``decision_id``,
* ``retrain``: a snapshot swap with its version, weights and observation count.

Replaying the log rebuilds theta, the design weights, the pending tickets and
the select/reward/expiry counters.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import os
import threading
import time
import uuid
from collections import deque
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .design import ContextBundle, SolverConfig, solve_bayesian, solve_d_optimal, uniform_weights
from .errors import DoptrecError
from .models import (
    GaussianPosterior,
    ObservationRecord,
    fit_arrays,
    load_snapshot,
    posterior_update_arrays,
)
from .policies import EXPLOIT, EXPLORE, REFIT, RESTART, StageConfig, StageController, linear_thompson_select

log = logging.getLogger(__name__)

MODES = ("frequentist", "bayesian")


class ServiceError(DoptrecError):
    """A request the service refuses; ``status`` is the HTTP status code."""

    def __init__(self, status: int, message: str, **extra: Any):
        super().__init__(message)
        self.status = status
        self.extra = extra


@dataclass
class ServiceConfig:
    k: int
    d: int
    mode: str = "frequentist"
    n_explore: int = 100
    n_exploit: int = 400
    ttl_seconds: float = 3600.0
    window: int = 1000
    ridge_fit: float = 1.0
    prior_var: float = 1.0
    noise_var: float = 0.25
    solver_ridge: float = 1e-6
    solver_epsilon: float = 1e-3
    lambda_prior: float | None = None
    n_mc: int = 1000
    seed: int = 0
    log_path: str | None = None
    snapshot_path: str | None = None
    sweep_interval: float = 60.0

    def __post_init__(self) -> None:
        if self.k < 1 or self.d < 1:
            raise ServiceError(400, "k and d must be >= 1")
        if self.mode not in MODES:
            raise ServiceError(400, f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.ttl_seconds > 0:
            raise ServiceError(400, "ttl_seconds must be > 0")
        if self.window < 1:
            raise ServiceError(400, "window must be >= 1")

    @property
    def stage(self) -> StageConfig:
        return StageConfig(self.n_explore, self.n_exploit)


@dataclass(frozen=True)
class Snapshot:
    version: int
    weights: tuple[float, ...]
    theta: tuple[float, ...]
    posterior: GaussianPosterior | None = None
    n_obs: int = 0
    design_refreshed: bool = False


@dataclass(frozen=True)
class DecisionTicket:
    decision_id: str
    round_id: int
    arm_index: int
    propensity: float
    mode: str
    model_version: int
    issued_at: float
    ttl_seconds: float
    features: tuple[float, ...] = ()

    def expired(self, now: float) -> bool:
        return now - self.issued_at > self.ttl_seconds


@dataclass
class Counters:
    selects: int = 0
    rewards: int = 0
    expiries: int = 0
    duplicates: int = 0
    unknown: int = 0
    late: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


class EventLog:
    """Append-only JSON-lines file; every line is flushed before returning."""

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path else None
        self._fh = open(self.path, "a", encoding="utf-8") if self.path else None
        self._lock = threading.Lock()

    def append(self, event: dict[str, Any]) -> None:
        if self._fh is None:
            return
        line = json.dumps(event, separators=(",", ":"))
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()
                self._fh = None


def read_events(path) -> list[dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        return []
    out = []
    with open(p, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ServiceError(500, f"{p}:{lineno}: corrupt log line ({exc.msg})") from None
    return out


def observations_from_log(path) -> list[ObservationRecord]:
    """ObservationRecords in log order, for offline refits."""
    return [ObservationRecord.from_json(e) for e in read_events(path) if e.get("event") == "observation"]


class BanditService:
    def __init__(self, config: ServiceConfig, clock: Callable[[], float] = time.time):
        self.config = config
        self.clock = clock
        self._lock = threading.RLock()
        self._retrain_lock = threading.Lock()
        self.controller = StageController(config.stage)
        self.rng = np.random.default_rng(config.seed)
        self.pending: dict[str, DecisionTicket] = {}
        self.consumed: set[str] = set()
        self.observations: list[ObservationRecord] = []
        self.recent: deque[np.ndarray] = deque(maxlen=config.window)
        self.counters = Counters()
        self.last_mode = EXPLORE
        self._round = 0
        self._obs_at_last_fit = 0
        self._snapshot = self._initial_snapshot()
        self._recover()
        self.log = EventLog(config.log_path)

    # -- state ------------------------------------------------------------

    def _initial_snapshot(self) -> Snapshot:
        c = self.config
        theta = np.zeros(c.d)
        posterior = GaussianPosterior.isotropic(c.d, c.prior_var, c.noise_var) if c.mode == "bayesian" else None
        version = 0
        if c.snapshot_path and Path(c.snapshot_path).exists():
            version, state = load_snapshot(Path(c.snapshot_path).read_text())
            if isinstance(state, GaussianPosterior):
                posterior, theta = state, state.mean
            else:
                theta = state.theta
            if theta.shape != (c.d,):
                raise ServiceError(500, f"snapshot has dimension {theta.shape[0]}, expected {c.d}")
        return Snapshot(version, tuple(uniform_weights(c.k)), tuple(theta), posterior)

    @property
    def snapshot(self) -> Snapshot:
        return self._snapshot

    def _recover(self) -> None:
        """Rebuild tickets, counters, observations and the snapshot from the log."""
        if not self.config.log_path:
            return
        events = read_events(self.config.log_path)
        last_retrain = None
        for e in events:
            kind = e.get("event")
            if kind == "decision":
                t = DecisionTicket(e["decision_id"], e["round"], e["arm"], e["propensity"], e["mode"],
                                   e["model_version"], e["issued_at"], e["ttl_seconds"], tuple(e["features"]))
                self.pending[t.decision_id] = t
                self.recent.append(np.asarray(e["arms"], dtype=float))
                self.counters.selects += 1
                self._round = max(self._round, t.round_id + 1)
                self._replay_controller(t.mode)
            elif kind == "observation":
                self.pending.pop(e["decision_id"], None)
                self.consumed.add(e["decision_id"])
                self.observations.append(ObservationRecord.from_json(e))
                if e.get("imputed"):
                    self.counters.expiries += 1
                else:
                    self.counters.rewards += 1
            elif kind == "retrain":
                last_retrain = e
        if last_retrain is not None:
            n = last_retrain["n_obs"]
            theta, posterior = self._fit(self.observations[:n])
            self._snapshot = Snapshot(last_retrain["version"], tuple(last_retrain["weights"]), tuple(theta),
                                      posterior, n, last_retrain["design_refreshed"])
            self._obs_at_last_fit = n
        if events:
            log.info("recovered %d events: %s", len(events), self.counters.as_dict())

    def _replay_controller(self, mode: str) -> None:
        ev = self._next_round()
        if ev != mode:
            log.warning("controller replay produced %s where the log has %s", ev, mode)

    def _next_round(self) -> str:
        while True:
            ev = self.controller.advance(None)
            if ev in (REFIT, RESTART):
                continue  # refits happen through /retrain
            if ev not in (EXPLORE, EXPLOIT):  # horizon reached; start a fresh schedule
                self.controller = StageController(self.config.stage)
                continue
            return ev

    # -- handlers ---------------------------------------------------------

    def _parse_arms(self, body: Any) -> np.ndarray:
        if not isinstance(body, dict) or "arms" not in body:
            raise ServiceError(400, "body must be an object with 'arms'")
        try:
            arms = np.asarray(body["arms"], dtype=float)
        except (TypeError, ValueError):
            raise ServiceError(400, "'arms' must be a list of numeric feature lists") from None
        if arms.ndim != 2 or arms.shape[0] == 0:
            raise ServiceError(400, "'arms' must be a nonempty list of equal-length feature lists")
        if arms.shape[1] != self.config.d:
            raise ServiceError(422, f"feature dimension {arms.shape[1]} does not match the model",
                               expected_d=self.config.d)
        if arms.shape[0] != self.config.k:
            raise ServiceError(422, f"got {arms.shape[0]} arms", expected_k=self.config.k)
        if not np.all(np.isfinite(arms)):
            raise ServiceError(422, "features must be finite")
        return arms

    def select(self, body: Any) -> dict[str, Any]:
        arms = self._parse_arms(body)
        bundle = ContextBundle(arms)
        snap = self._snapshot  # one read: the decision uses this pair throughout
        with self._lock:
            mode = self._next_round()
            if mode == EXPLORE:
                w = np.asarray(snap.weights)
                arm = int(self.rng.choice(self.config.k, p=w / w.sum()))
                propensity = float(snap.weights[arm])
            elif snap.posterior is not None:
                dec = linear_thompson_select(snap.posterior, bundle, self.rng, self.config.n_mc)
                arm, propensity = dec.arm_index, dec.propensity
            else:
                arm, propensity = int(np.argmax(arms @ np.asarray(snap.theta))), 1.0  # ties to the lower index
            ticket = DecisionTicket(uuid.uuid4().hex, self._round, arm, propensity, mode, snap.version,
                                    self.clock(), self.config.ttl_seconds, tuple(arms[arm].tolist()))
            self._round += 1
            self.pending[ticket.decision_id] = ticket
            self.recent.append(arms)
            self.counters.selects += 1
            self.last_mode = mode
            self.log.append({"event": "decision", "decision_id": ticket.decision_id,
                             "request_id": body.get("request_id"), "round": ticket.round_id, "arm": arm,
                             "propensity": propensity, "mode": mode, "model_version": snap.version,
                             "issued_at": ticket.issued_at, "ttl_seconds": ticket.ttl_seconds,
                             "features": list(ticket.features), "arms": arms.tolist()})
        return {"decision_id": ticket.decision_id, "arm_index": arm, "propensity": propensity,
                "mode": mode, "model_version": snap.version}

    def _record(self, ticket: DecisionTicket, reward: float, imputed: bool) -> None:
        rec = ObservationRecord(ticket.round_id, np.asarray(ticket.features), ticket.arm_index,
                                ticket.propensity, reward)
        self.pending.pop(ticket.decision_id, None)
        self.consumed.add(ticket.decision_id)
        self.observations.append(rec)
        self.log.append({"event": "observation", **rec.to_json(), "imputed": imputed,
                         "decision_id": ticket.decision_id, "mode": ticket.mode})

    def reward(self, body: Any) -> dict[str, Any]:
        if not isinstance(body, dict) or not isinstance(body.get("decision_id"), str) or "reward" not in body:
            raise ServiceError(400, "body must be an object with string 'decision_id' and 'reward'")
        r = body["reward"]
        if isinstance(r, bool) or not isinstance(r, (int, float)):
            raise ServiceError(400, "'reward' must be a number")
        if not (math.isfinite(r) and 0.0 <= r <= 1.0):
            raise ServiceError(422, f"reward {r} outside [0, 1]")
        did = body["decision_id"]
        with self._lock:
            ticket = self.pending.get(did)
            if ticket is None:
                if did in self.consumed:
                    self.counters.duplicates += 1
                    return {"status": "duplicate", "decision_id": did}
                self.counters.unknown += 1
                return {"status": "unknown", "decision_id": did}
            if ticket.expired(self.clock()):
                self.counters.late += 1
                return {"status": "expired", "decision_id": did}
            self._record(ticket, float(r), imputed=False)
            self.counters.rewards += 1
        return {"status": "recorded", "decision_id": did}

    def sweep(self) -> int:
        """Record reward 0 for every expired ticket; returns how many."""
        now = self.clock()
        with self._lock:
            expired = [t for t in self.pending.values() if t.expired(now)]
            for t in sorted(expired, key=lambda t: t.round_id):
                self._record(t, 0.0, imputed=True)
                self.counters.expiries += 1
        return len(expired)

    def _fit(self, obs: list[ObservationRecord]) -> tuple[np.ndarray, GaussianPosterior | None]:
        c = self.config
        Phi = np.array([o.features for o in obs]).reshape(len(obs), c.d)
        y = np.array([o.reward for o in obs])
        if c.mode == "bayesian":
            post = posterior_update_arrays(GaussianPosterior.isotropic(c.d, c.prior_var, c.noise_var), Phi, y)
            return post.mean, post
        return fit_arrays(Phi, y, c.ridge_fit).theta, None

    def _design(self, obs: list[ObservationRecord]) -> tuple[np.ndarray, bool]:
        with self._lock:
            if not self.recent:
                return np.asarray(self._snapshot.weights), False
            rep = ContextBundle(np.mean(np.stack(list(self.recent)), axis=0))
        c = self.config
        cfg = SolverConfig(epsilon=c.solver_epsilon, ridge=c.solver_ridge,
                           lambda_prior=c.lambda_prior if c.lambda_prior is not None else 1.0 / c.n_explore)
        try:
            if c.mode == "bayesian":
                res = solve_bayesian(rep, np.array([o.features for o in obs]).reshape(len(obs), c.d), cfg)
            else:
                res = solve_d_optimal(rep, cfg)
        except DoptrecError as exc:
            log.warning("design solve failed, keeping uniform weights: %s", exc)
            return uniform_weights(c.k), False
        return res.weights, True

    def retrain(self, body: Any = None) -> dict[str, Any]:
        body = body or {}
        if not isinstance(body, dict):
            raise ServiceError(400, "body must be an object")
        need = body.get("min_new_observations", 1)
        if isinstance(need, bool) or not isinstance(need, int) or need < 0:
            raise ServiceError(400, "'min_new_observations' must be a non-negative integer")
        with self._retrain_lock:
            self.sweep()
            with self._lock:
                obs = list(self.observations)
            new = len(obs) - self._obs_at_last_fit
            if new < max(need, 1):
                raise ServiceError(409, f"not ready: {new} new observations, need {max(need, 1)}",
                                   new_observations=new)
            theta, posterior = self._fit(obs)
            weights, refreshed = self._design(obs)
            old = self._snapshot
            snap = Snapshot(old.version + 1, tuple(float(w) for w in weights), tuple(theta.tolist()),
                            posterior, len(obs), refreshed)
            with self._lock:
                self.log.append({"event": "retrain", "version": snap.version, "n_obs": snap.n_obs,
                                 "weights": list(snap.weights), "theta": list(snap.theta),
                                 "design_refreshed": refreshed})
                self._snapshot = snap
            self._obs_at_last_fit = len(obs)
            self._write_snapshot(snap)
        return {"model_version": snap.version, "design_refreshed": refreshed}

    def _write_snapshot(self, snap: Snapshot) -> None:
        if not self.config.snapshot_path:
            return
        if snap.posterior is not None:
            doc = snap.posterior.to_snapshot(snap.version)
        else:
            doc = {"version": snap.version, "theta": list(snap.theta)}
        path = Path(self.config.snapshot_path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(doc))
        os.replace(tmp, path)

    def policy(self) -> dict[str, Any]:
        snap = self._snapshot
        out = {"weights": list(snap.weights), "model_version": snap.version, "stage_mode": self.last_mode,
               "counters": self.counters.as_dict(), "pending": len(self.pending), "mode": self.config.mode,
               "theta": list(snap.theta), "n_obs": snap.n_obs}
        if snap.posterior is not None:
            out["posterior"] = {"mean": snap.posterior.mean.tolist(),
                                "variance": np.diag(snap.posterior.covariance).tolist(),
                                "noise_var": snap.posterior.noise_var}
        return out

    def health(self) -> dict[str, Any]:
        return {"status": "ok", "model_version": self._snapshot.version}

    def close(self) -> None:
        self.log.close()


# ---------------------------------------------------------------------------
# HTTP adapter


def create_app(service: BanditService, sweep: bool = False):
    """FastAPI app over ``service``; ``sweep`` starts the periodic expiry sweep."""

    @asynccontextmanager
    async def lifespan(app):
        task = None
        if sweep:
            async def loop():
                while True:
                    await asyncio.sleep(service.config.sweep_interval)
                    service.sweep()
            task = asyncio.create_task(loop())
        try:
            yield
        finally:
            if task:
                task.cancel()
            service.close()

    app = FastAPI(title="doptrec bandit service", lifespan=lifespan)

    async def body_of(request: Request, required: bool = True):
        raw = await request.body()
        if not raw and not required:
            return {}
        try:
            return json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ServiceError(400, f"malformed JSON: {exc}") from None

    @app.exception_handler(ServiceError)
    async def service_error(request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"error": str(exc), **exc.extra})

    @app.post("/select")
    async def select(request: Request):
        return service.select(await body_of(request))

    @app.post("/reward")
    async def reward(request: Request):
        return service.reward(await body_of(request))

    @app.post("/retrain")
    async def retrain(request: Request):
        return service.retrain(await body_of(request, required=False))

    @app.get("/policy")
    def policy():
        return service.policy()

    @app.get("/health")
    def health():
        return service.health()

    return app
