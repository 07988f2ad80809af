"""D-optimal experiment design over a finite set of arms.

Given per-arm feature vectors phi_1..phi_k in R^d, a design is a probability
vector ``pi`` over the arms and its information matrix is

    M(pi) = sum_i pi_i phi_i phi_i^T  (+ ridge * I)  (+ lambda * Phi^T Phi)

where the last term carries the history of earlier exploration rounds in the
Bayesian variant.  The solver maximizes ``log det M(pi)`` with a Frank-Wolfe
(Fedorov-Wynn) iteration that starts from the uniform design, takes
closed-form toward steps at the arm of largest leverage, and optionally
takes away/drop steps at the support arm of smallest leverage.  The
Kiefer-Wolfowitz equivalence gives a certificate: at the optimum no arm has
leverage ``phi^T M^{-1} phi`` above the design-averaged leverage, which is
``d`` in the pure problem.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg as sla

from .errors import ContractViolation, InputError, SingularDesignError

SIMPLEX_ATOL = 1e-9
_DRIFT_TOL = 1e-6


@dataclass(frozen=True)
class ContextBundle:
    """Per-arm feature vectors for one round, stored as a read-only (k, d) array."""

    arms: np.ndarray
    round_id: int = 0

    def __post_init__(self) -> None:
        arms = np.array(self.arms, dtype=float, copy=True)
        if arms.ndim != 2:
            raise ContractViolation(f"arms must be a (k, d) matrix, got shape {arms.shape}")
        k, d = arms.shape
        if k < 2:
            raise ContractViolation(f"need at least 2 arms, got {k}")
        if d < 1:
            raise ContractViolation("feature dimension must be >= 1")
        if not np.all(np.isfinite(arms)):
            raise InputError("arm features contain non-finite entries")
        arms.setflags(write=False)
        object.__setattr__(self, "arms", arms)

    @property
    def k(self) -> int:
        return self.arms.shape[0]

    @property
    def d(self) -> int:
        return self.arms.shape[1]

    @classmethod
    def from_json(cls, doc: dict[str, Any] | str) -> ContextBundle:
        if isinstance(doc, str):
            doc = json.loads(doc)
        if not isinstance(doc, dict) or "arms" not in doc:
            raise InputError('bundle document must be an object with an "arms" list')
        arms = doc["arms"]
        if not isinstance(arms, list) or not all(isinstance(a, list) for a in arms):
            raise InputError('"arms" must be a list of feature lists')
        if len({len(a) for a in arms}) > 1:
            raise ContractViolation("all arm feature vectors must have the same length")
        return cls(np.asarray(arms, dtype=float), int(doc.get("round_id", 0)))

    def to_json(self) -> dict[str, Any]:
        return {"round_id": self.round_id, "arms": self.arms.tolist()}


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the Frank-Wolfe design solver.

    ``max_iter=None`` resolves to ``ceil(10 * (d log log max(k, 3) + d / epsilon))``.
    ``record_trace`` stores the exact log-det after every iteration, which costs
    one extra factorization per step and is meant for diagnostics and tests.
    """

    epsilon: float = 1e-3
    max_iter: int | None = None
    ridge: float = 1e-8
    lambda_prior: float = 0.0
    tie_break: str = "lowest_index"
    away_steps: bool = True
    record_trace: bool = False

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ContractViolation("epsilon must be > 0")
        if self.max_iter is not None and self.max_iter < 1:
            raise ContractViolation("max_iter must be >= 1")
        if self.ridge < 0:
            raise ContractViolation("ridge must be >= 0")
        if self.lambda_prior < 0:
            raise ContractViolation("lambda_prior must be >= 0")
        if self.tie_break != "lowest_index":
            raise ContractViolation(f"unknown tie_break rule {self.tie_break!r}")

    def resolved_max_iter(self, k: int, d: int) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return math.ceil(10 * (d * math.log(math.log(max(k, 3))) + d / self.epsilon))


@dataclass
class SolverResult:
    weights: np.ndarray
    objective: float
    certificate_gap: float
    iterations: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict[str, Any]:
        return {
            "weights": [float(w) for w in self.weights],
            "objective": float(self.objective),
            "certificate_gap": float(self.certificate_gap),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def check_weights(weights: Sequence[float] | np.ndarray, k: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (k,):
        raise ContractViolation(f"weights must have length {k}, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < -SIMPLEX_ATOL) or np.any(w > 1 + SIMPLEX_ATOL):
        raise ContractViolation("weights must lie in [0, 1]")
    if abs(w.sum() - 1.0) > SIMPLEX_ATOL:
        raise ContractViolation(f"weights must sum to 1, got {w.sum():.12g}")
    return w


def uniform_weights(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def fisher_info(weights, bundle: ContextBundle, ridge: float = 0.0) -> np.ndarray:
    """Return ``sum_i w_i phi_i phi_i^T + ridge * I`` as a symmetric (d, d) array."""
    if ridge < 0:
        raise ContractViolation("ridge must be >= 0")
    w = check_weights(weights, bundle.k)
    X = bundle.arms
    M = (X * w[:, None]).T @ X
    M = 0.5 * (M + M.T)
    if ridge:
        M[np.diag_indices_from(M)] += ridge
    return M


def _history_matrix(history_features, d: int) -> np.ndarray:
    H = np.asarray(history_features, dtype=float)
    if H.size == 0:
        return np.zeros((0, d))
    if H.ndim == 1:
        H = H[None, :]
    if H.ndim != 2 or H.shape[1] != d:
        raise ContractViolation(f"history features must be rows of length {d}, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise InputError("history features contain non-finite entries")
    return H


def log_det_objective(weights, bundle: ContextBundle, ridge: float = 0.0,
                      history_features=None, lambda_prior: float = 0.0) -> float:
    """``log det`` of the (optionally history-augmented) information matrix; -inf if singular."""
    M = fisher_info(weights, bundle, ridge)
    if history_features is not None and lambda_prior:
        H = _history_matrix(history_features, bundle.d)
        M = M + lambda_prior * (H.T @ H)
    sign, logdet = np.linalg.slogdet(M)
    return float(logdet) if sign > 0 else -math.inf


def _invert_pd(M: np.ndarray) -> np.ndarray:
    try:
        c = sla.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("information matrix is not positive definite") from exc
    Minv = sla.cho_solve(c, np.eye(M.shape[0]), check_finite=False)
    return 0.5 * (Minv + Minv.T)


def leverages(weights, bundle: ContextBundle, ridge: float = 0.0) -> np.ndarray:
    """Prediction-variance leverage ``phi_i^T M^{-1} phi_i`` of every arm."""
    M = fisher_info(weights, bundle, ridge)
    Minv = _invert_pd(M)
    X = bundle.arms
    return np.einsum("ij,jk,ik->i", X, Minv, X)


def g_optimality_gap(weights, bundle: ContextBundle, ridge: float = 0.0) -> float:
    """Relative excess of the largest leverage over its optimal value.

    Returns ``max_i g_i / tr(M^{-1} M_design) - 1`` where ``M_design`` excludes
    the ridge.  With ``ridge == 0`` the denominator is exactly ``d`` and the
    value is ``max_i g_i / d - 1``; it is zero precisely at a D-optimal design.
    """
    w = check_weights(weights, bundle.k)
    g = leverages(w, bundle, ridge)
    return float(g.max() / float(w @ g) - 1.0)


# --------------------------------------------------------------------------
# step-size rules


def _closed_form_step(g: float, p: int) -> float:
    """Exact line-search step toward (or away from) an arm of leverage ``g`` when M has no base term."""
    if g == 1.0:
        return -math.inf if p > 1 else 0.0
    return (g / p - 1.0) / (g - 1.0)


def _line_search(nu: np.ndarray, lo: float, hi: float) -> float:
    """Maximize the concave ``sum log(1 + s*nu)`` over ``s`` in ``[lo, hi]``."""
    pos = nu > 1e-15
    neg = nu < -1e-15
    # open domain 1 + s*nu > 0, kept a hair inside the boundary
    if np.any(neg):
        hi = min(hi, float(np.min(-1.0 / nu[neg])) * (1 - 1e-12))
    if np.any(pos):
        lo = max(lo, float(np.max(-1.0 / nu[pos])) * (1 - 1e-12))

    def deriv(s: float) -> float:
        return float(np.sum(nu / (1.0 + s * nu)))

    d0 = deriv(0.0)
    if d0 > 0:
        a, b = 0.0, hi
        if deriv(b) >= 0:
            return b
    elif d0 < 0:
        a, b = lo, 0.0
        if deriv(a) <= 0:
            return a
    else:
        return 0.0
    # safeguarded Newton on the decreasing derivative
    s = 0.5 * (a + b)
    for _ in range(100):
        t = 1.0 + s * nu
        f = float(np.sum(nu / t))
        if f > 0:
            a = s
        else:
            b = s
        fp = -float(np.sum((nu / t) ** 2))
        s_new = s - f / fp if fp < 0 else 0.5 * (a + b)
        if not (a < s_new < b):
            s_new = 0.5 * (a + b)
        if abs(s_new - s) <= 1e-15 * max(1.0, abs(s)) or b - a <= 1e-15:
            s = s_new
            break
        s = s_new
    return s


# --------------------------------------------------------------------------
# core Frank-Wolfe loop on a (possibly reduced) problem


class _Core:
    """Frank-Wolfe state for ``max log det(Z^T diag(pi) Z + B)`` in p dimensions.

    With ``exact_steps`` the step size comes from an exact line search (used
    when ``B`` carries history information).  Otherwise ``B`` must be ``None``
    or a multiple of the identity and steps use the closed form, which is exact
    without ``B``; toward steps stay monotone under a ridge because the extra
    ``s * B`` term is PSD, and away steps are verified against the true log-det.
    """

    def __init__(self, Z: np.ndarray, base: np.ndarray | None, pi: np.ndarray,
                 exact_steps: bool = False):
        self.Z = Z
        self.base = base
        self.exact_steps = exact_steps
        self.k, self.p = Z.shape
        self.pi = pi.copy()
        self._eye = np.eye(self.p)
        self.steps_since_refactor = 0
        self._refactor()

    def _refactor(self) -> None:
        np.clip(self.pi, 0.0, None, out=self.pi)
        self.pi /= self.pi.sum()
        self._M: np.ndarray | None = None
        self.Minv = _invert_pd(self.M)
        self.g = np.einsum("ij,ij->i", self.Z @ self.Minv, self.Z)
        self.logdet: float | None = None
        self.steps_since_refactor = 0

    @property
    def M(self) -> np.ndarray:
        # built on demand; closed-form steps only update the inverse
        if self._M is None:
            Md = (self.Z * self.pi[:, None]).T @ self.Z
            M = Md + self.base if self.base is not None else Md
            self._M = 0.5 * (M + M.T)
        return self._M

    def leverages(self) -> np.ndarray:
        return self.g

    def objective(self) -> float:
        sign, logdet = np.linalg.slogdet(self.M)
        return float(logdet) if sign > 0 else -math.inf

    def _exact_step(self, z: np.ndarray, lo: float, hi: float) -> float:
        L = np.linalg.cholesky(self.M)
        Linv = sla.solve_triangular(L, self._eye, lower=True, check_finite=False)
        u = Linv @ z
        Md = self.M - self.base if self.base is not None else self.M
        S = np.outer(u, u) - Linv @ Md @ Linv.T
        nu = np.linalg.eigvalsh(0.5 * (S + S.T))
        return _line_search(nu, lo, hi)

    def _move(self, j: int, s: float, drop: bool) -> None:
        # (1-s) pi + s e_j stays on the simplex for s in [lo, 1]; rounding is
        # cleaned up at the next refactorization
        self.pi *= 1.0 - s
        self.pi[j] += s
        if drop:
            self.pi[j] = 0.0

    def step(self, j: int, g_j: float, toward: bool) -> float:
        """Move mass toward (``toward``) or away from arm ``j``; return the step taken."""
        pi_j = self.pi[j]
        if toward:
            lo, hi = 0.0, 1.0
        else:
            if pi_j >= 1.0:
                return 0.0
            lo, hi = -pi_j / (1.0 - pi_j), 0.0
        z = self.Z[j]
        if self.exact_steps:
            s = self._exact_step(z, lo, hi)
            if s == 0.0:
                return 0.0
            self._move(j, s, drop=(not toward) and s <= lo)
            self._refactor()
            return s

        s = _closed_form_step(g_j, self.p)
        if not toward and (s > 0 or s == -math.inf):
            s = lo
        s = min(max(s, lo), hi)
        if s == 0.0:
            return 0.0
        if self.base is not None and not toward and not self._away_step_improves(z, s, g_j):
            # a negative step shrinks the ridge share; confirm the true objective improves
            M_new = (1.0 - s) * self.M + s * (z[:, None] * z) + s * self.base
            if self.logdet is None:
                self.logdet = float(np.linalg.slogdet(self.M)[1])
            new_logdet = float(np.linalg.slogdet(M_new)[1])
            if new_logdet < self.logdet:
                s = self._exact_step(z, lo, hi)
                if s == 0.0:
                    return 0.0
                self._move(j, s, drop=s <= lo)
                self._refactor()
                return s
        drop = (not toward) and s <= lo
        self._move(j, s, drop)
        if s >= 1.0:
            self._refactor()
            return s
        c = s / (1.0 - s)
        coef = c / (1.0 + c * g_j)
        v = self.Minv @ z
        u = self.Z @ v
        self.Minv = (self.Minv - coef * (v[:, None] * v)) / (1.0 - s)
        self.g = (self.g - coef * (u * u)) / (1.0 - s)
        self._M = None
        self.logdet = None
        self.steps_since_refactor += 1
        if self.steps_since_refactor >= self.p * self.p:
            self._refactor()
        elif self.steps_since_refactor % self.p == 0 and np.max(np.abs(self.M @ self.Minv - self._eye)) > _DRIFT_TOL:
            self._refactor()
        return s

    def _away_step_improves(self, z: np.ndarray, s: float, g: float) -> bool:
        """Cheap sufficient test that an away step of size ``s < 0`` raises the log-det.

        With ``A = (1-s) M + s z z^T`` the new matrix is ``A + s*r*I``.  When
        ``E = s*r*A^{-1}`` has eigenvalues in ``[-1/2, 0]``, ``log(1 + e) >= 2e``
        gives ``log det(A + s r I) >= log det A + 2 tr E``.  A False return only
        means the bound is inconclusive.
        """
        c = s / (1.0 - s)
        denom = 1.0 + c * g
        if denom <= 0.0:
            return False
        v = self.Minv @ z
        tr_ainv = (float(np.trace(self.Minv)) - c / denom * float(v @ v)) / (1.0 - s)
        e_trace = s * float(self.base[0, 0]) * tr_ainv
        if not -0.5 <= e_trace <= 0.0:
            return False
        gain = self.p * math.log1p(-s) + math.log(denom)
        return gain + 2.0 * e_trace > 1e-9


def _reduce(X: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, float] | None:
    """Whiten by a positive-definite base and project onto the span of the arms.

    Returns ``(Z, offset)`` with ``log det(X^T P X + B) = offset + log det(Z^T P Z + I)``
    and identical leverages, or ``None`` when ``B`` is not positive definite.
    """
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        return None
    offset = 2.0 * float(np.sum(np.log(np.diag(L))))
    Xw = sla.solve_triangular(L, X.T, lower=True, check_finite=False)  # (d, k)
    _, R = np.linalg.qr(Xw, mode="reduced")
    return R.T.copy(), offset


def _run(Z: np.ndarray, base: np.ndarray | None, exact_steps: bool, config: SolverConfig,
         max_iter: int, trace_fn=None) -> tuple[np.ndarray, int, list[float]]:
    k = Z.shape[0]
    core = _Core(Z, base, np.full(k, 1.0 / k), exact_steps)
    trace: list[float] = []
    if trace_fn is not None:
        trace.append(trace_fn(core))
    it = 0
    while it < max_iter:
        g = core.leverages()
        avg = float(core.pi @ g)
        j_up = int(np.argmax(g))
        if g[j_up] / avg - 1.0 <= config.epsilon:
            if core.steps_since_refactor == 0:
                break
            # confirm against a fresh factorization before stopping
            core._refactor()
            continue
        toward = True
        j = j_up
        if config.away_steps:
            j_down = int(np.argmin(np.where(core.pi > 0, g, np.inf)))
            if avg - g[j_down] > g[j_up] - avg and core.pi[j_down] < 1.0:
                toward, j = False, j_down
        s = core.step(j, float(g[j]), toward)
        it += 1
        if trace_fn is not None:
            trace.append(trace_fn(core))
        if s == 0.0 and toward:
            break
    return core.pi, it, trace


def _certificate(Z: np.ndarray, base: np.ndarray | None, pi: np.ndarray) -> float:
    Md = (Z * pi[:, None]).T @ Z
    M = Md + base if base is not None else Md
    Minv = _invert_pd(0.5 * (M + M.T))
    g = np.sum((Z @ Minv) * Z, axis=1)
    return float(g.max() / float(pi @ g) - 1.0)


def _solve(bundle: ContextBundle, B: np.ndarray | None, config: SolverConfig,
           history: np.ndarray | None = None) -> SolverResult:
    X = bundle.arms
    k, d = X.shape
    max_iter = config.resolved_max_iter(k, d)

    rank = int(np.linalg.matrix_rank(X))
    exact_steps = True
    if B is None:
        if rank < d:
            raise SingularDesignError(
                f"arm features span only a rank-{rank} subspace of R^{d}; every design has "
                f"log det = -inf. Pass ridge > 0 to regularize.", rank=rank, dim=d)
        Z, base, exact_steps = X, None, False
    elif history is None and rank == d:
        # ridge only, arms span R^d: closed-form steps remain monotone
        Z, base, exact_steps = X, B, False
    else:
        reduced = _reduce(X, B)
        if reduced is not None:
            Z, _ = reduced
            base = np.eye(Z.shape[1])
        else:
            stacked = X if history is None else np.vstack([X, history])
            M0 = (X.T @ X) / k + B
            if np.linalg.matrix_rank(M0) < d:
                rank = int(np.linalg.matrix_rank(stacked))
                raise SingularDesignError(
                    f"arm and history features span only a rank-{rank} subspace of R^{d}; "
                    f"pass ridge > 0 to regularize.", rank=rank, dim=d)
            Z, base = X, B

    trace_fn = None
    if config.record_trace:
        def trace_fn(core: _Core) -> float:
            return _full_objective(X, core.pi, B)

    pi, iters, trace = _run(Z, base, exact_steps, config, max_iter, trace_fn)
    pi = np.clip(pi, 0.0, None)
    pi[pi < 1e-15] = 0.0
    pi /= pi.sum()
    gap = _certificate(Z, base, pi)
    return SolverResult(
        weights=pi,
        objective=_full_objective(X, pi, B),
        certificate_gap=gap,
        iterations=iters,
        converged=gap <= config.epsilon,
        objective_trace=trace,
    )


def _full_objective(X: np.ndarray, pi: np.ndarray, B: np.ndarray | None) -> float:
    M = (X * pi[:, None]).T @ X
    if B is not None:
        M = M + B
    sign, logdet = np.linalg.slogdet(0.5 * (M + M.T))
    return float(logdet) if sign > 0 else -math.inf


def solve_d_optimal(bundle: ContextBundle, config: SolverConfig | None = None) -> SolverResult:
    """Maximize ``log det(M(pi) + ridge I)`` over the probability simplex."""
    config = config or SolverConfig()
    d = bundle.d
    B = config.ridge * np.eye(d) if config.ridge > 0 else None
    return _solve(bundle, B, config)


def solve_bayesian(bundle: ContextBundle, history_features, config: SolverConfig | None = None) -> SolverResult:
    """Maximize ``log det(M(pi) + ridge I + lambda * Phi^T Phi)`` where Phi stacks earlier feature rows."""
    config = config or SolverConfig()
    d = bundle.d
    H = _history_matrix(history_features if history_features is not None else [], d)
    B = np.zeros((d, d))
    if config.ridge > 0:
        B[np.diag_indices(d)] += config.ridge
    if config.lambda_prior > 0 and len(H):
        B += config.lambda_prior * (H.T @ H)
    if not np.any(B):
        return _solve(bundle, None, config)
    B = 0.5 * (B + B.T)
    if config.lambda_prior > 0 and len(H):
        return _solve(bundle, B, config, history=H)
    return _solve(bundle, B, config)


def frank_wolfe_step(weights, bundle: ContextBundle, config: SolverConfig | None = None) -> np.ndarray:
    """One toward step: move mass to the arm of largest leverage.

    Uses the closed-form step ``(g/d - 1)/(g - 1)`` when ``config.ridge == 0``
    and the exact line search otherwise, so the objective never decreases.
    Returns the weights unchanged when no arm's leverage exceeds the average.
    """
    config = config or SolverConfig(ridge=0.0)
    w = check_weights(weights, bundle.k).copy()
    X = bundle.arms
    base = config.ridge * np.eye(bundle.d) if config.ridge > 0 else None
    core = _Core(X, base, w, exact_steps=base is not None)
    g = core.leverages()
    j = int(np.argmax(g))
    if g[j] <= float(w @ g) * (1 + 1e-12):
        return w
    core.step(j, float(g[j]), toward=True)
    return core.pi
