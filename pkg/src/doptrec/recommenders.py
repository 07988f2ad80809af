"""Candidate recommenders retrained from a mutable ratings store.

Four recommenders produce top-m item lists: user-based and item-based
collaborative filtering (cosine similarity on positive-label vectors),
popularity, and explicit-feedback matrix factorization trained by
alternating least squares.  All recommendations exclude items in the user's
training history and rejection list.  When a neighbourhood method has no
signal for a user it falls back to popularity and sets ``fallback``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .data import POSITIVE_THRESHOLD, RatingTable
from .errors import ContractViolation, TrainingRequiredError

RECOMMENDER_NAMES = ("user_cf", "item_cf", "popularity", "mf")


@dataclass(frozen=True)
class Recommendation:
    user_id: int
    items: tuple[int, ...]
    recommender_id: str
    fallback: bool = False


class RatingsStore:
    """Training ratings, rejection list and catalog index maps.

    ``catalog_users`` / ``catalog_items`` fix the index maps; by default they
    are the ids present in the initial training table.
    """

    def __init__(self, train: RatingTable | None = None, catalog_users: Iterable[int] | None = None,
                 catalog_items: Iterable[int] | None = None):
        train = train if train is not None else RatingTable([], [], [], [])
        users = set(train.user.tolist()) | set(catalog_users or ())
        items = set(train.movie.tolist()) | set(catalog_items or ())
        self.user_ids = np.array(sorted(users), dtype=np.int64)
        self.item_ids = np.array(sorted(items), dtype=np.int64)
        self.user_index = {int(u): k for k, u in enumerate(self.user_ids)}
        self.item_index = {int(i): k for k, i in enumerate(self.item_ids)}
        self._ratings: dict[tuple[int, int], float] = {}
        self._history: dict[int, set[int]] = {}
        self.rejections: dict[int, set[int]] = {}
        self.version = 0
        for u, i, r in zip(train.user.tolist(), train.movie.tolist(), train.rating.tolist()):
            self.add(u, i, r)

    # -- mutation -----------------------------------------------------------
    def add(self, user_id: int, item_id: int, rating: float) -> None:
        key = (int(user_id), int(item_id))
        if key in self._ratings:
            raise ContractViolation(f"duplicate (user, item) pair {key}")
        if item_id in self.rejections.get(user_id, ()):
            raise ContractViolation(f"pair {key} is on the rejection list")
        self._require(user_id, item_id)
        self._ratings[key] = float(rating)
        self._history.setdefault(key[0], set()).add(key[1])
        self.version += 1

    def reject(self, user_id: int, item_id: int) -> None:
        key = (int(user_id), int(item_id))
        if key in self._ratings:
            raise ContractViolation(f"pair {key} is already in the training data")
        self._require(user_id, item_id)
        self.rejections.setdefault(key[0], set()).add(key[1])

    def _require(self, user_id: int, item_id: int) -> None:
        if user_id not in self.user_index:
            raise ContractViolation(f"unknown user {user_id}")
        if item_id not in self.item_index:
            raise ContractViolation(f"unknown item {item_id}")

    # -- queries ------------------------------------------------------------
    def __len__(self) -> int:
        return len(self._ratings)

    def __contains__(self, pair) -> bool:
        return (int(pair[0]), int(pair[1])) in self._ratings

    def rating(self, user_id: int, item_id: int) -> float | None:
        return self._ratings.get((int(user_id), int(item_id)))

    def label(self, user_id: int, item_id: int) -> int | None:
        r = self.rating(user_id, item_id)
        return None if r is None else int(r >= POSITIVE_THRESHOLD)

    def history(self, user_id: int) -> set[int]:
        return self._history.get(int(user_id), set())

    def rejected(self, user_id: int) -> set[int]:
        return self.rejections.get(int(user_id), set())

    def n_rejected(self) -> int:
        return sum(len(s) for s in self.rejections.values())

    def eligible_mask(self, user_id: int) -> np.ndarray:
        mask = np.ones(self.item_ids.shape[0], dtype=bool)
        blocked = self.history(user_id) | self.rejected(user_id)
        if blocked:
            mask[[self.item_index[i] for i in blocked]] = False
        return mask

    def matrices(self) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
        """(positive-label indicator, raw rating) user x item matrices."""
        n_u, n_i = self.user_ids.shape[0], self.item_ids.shape[0]
        if not self._ratings:
            z = sparse.csr_matrix((n_u, n_i))
            return z, z.copy()
        keys = np.array(list(self._ratings.keys()), dtype=np.int64)
        vals = np.array(list(self._ratings.values()), dtype=float)
        rows = np.array([self.user_index[u] for u in keys[:, 0].tolist()])
        cols = np.array([self.item_index[i] for i in keys[:, 1].tolist()])
        R = sparse.csr_matrix((vals, (rows, cols)), shape=(n_u, n_i))
        pos = vals >= POSITIVE_THRESHOLD
        P = sparse.csr_matrix((np.ones(pos.sum()), (rows[pos], cols[pos])), shape=(n_u, n_i))
        return P, R


_DENSE_SIM_MAX = 8000


def _top_m(scores: np.ndarray, mask: np.ndarray, m: int, positive_only: bool) -> np.ndarray:
    """Indices of the m best eligible scores, ties to the lower index.

    Scores are rounded to 12 decimals first so that ties which are exact in
    real arithmetic are not split by floating-point noise.
    """
    scores = np.round(scores, 12)
    ok = mask & (scores > 0) if positive_only else mask.copy()
    cand = np.flatnonzero(ok)
    if cand.size == 0:
        return cand
    order = np.argsort(-scores[cand], kind="stable")
    return cand[order[:m]]


def _row_normalize(X: sparse.csr_matrix) -> sparse.csr_matrix:
    norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return sparse.diags(inv) @ X


class Recommender:
    name = "recommender"

    def fit(self, store: RatingsStore) -> None:
        raise NotImplementedError

    def scores(self, store: RatingsStore, user_id: int) -> np.ndarray | None:
        raise NotImplementedError

    def recommend(self, store: RatingsStore, user_id: int, m: int = 1) -> Recommendation:
        raise NotImplementedError


class PopularityRecommender(Recommender):
    """Rating counts normalized by the largest count."""

    name = "popularity"

    def __init__(self):
        self.popularity: np.ndarray | None = None

    def fit(self, store: RatingsStore) -> None:
        _, R = store.matrices()
        counts = np.asarray((R != 0).sum(axis=0)).ravel().astype(float)
        top = counts.max() if counts.size else 0.0
        self.popularity = counts / top if top > 0 else counts

    def scores(self, store, user_id):
        if self.popularity is None:
            self.fit(store)
        return self.popularity

    def recommend(self, store, user_id, m=1):
        idx = _top_m(self.scores(store, user_id), store.eligible_mask(user_id), m, positive_only=True)
        items = tuple(int(store.item_ids[k]) for k in idx)
        return Recommendation(user_id, items, self.name, fallback=not items)


class _NeighbourhoodRecommender(Recommender):
    def __init__(self, popularity: PopularityRecommender | None = None):
        self.popularity = popularity or PopularityRecommender()
        self._fitted_version = -1

    def _fallback(self, store, user_id, m):
        rec = self.popularity.recommend(store, user_id, m)
        return Recommendation(user_id, rec.items, self.name, fallback=True)

    def recommend(self, store, user_id, m=1):
        if self._fitted_version < 0:
            self.fit(store)
        s = self.scores(store, user_id)
        if s is None:
            return self._fallback(store, user_id, m)
        idx = _top_m(s, store.eligible_mask(user_id), m, positive_only=True)
        if idx.size == 0:
            return self._fallback(store, user_id, m)
        return Recommendation(user_id, tuple(int(store.item_ids[k]) for k in idx), self.name)


class UserCFRecommender(_NeighbourhoodRecommender):
    """Votes of the nearest users by cosine similarity of positive-label vectors."""

    name = "user_cf"

    def __init__(self, n_neighbors: int = 30, popularity: PopularityRecommender | None = None):
        super().__init__(popularity)
        self.n_neighbors = n_neighbors

    def fit(self, store):
        P, _ = store.matrices()
        self.P = P.tocsr()
        self.Pn = _row_normalize(self.P).tocsr()
        # dense user-user similarities when they fit comfortably in memory
        n_u = self.P.shape[0]
        self._S = (self.Pn @ self.Pn.T).toarray() if n_u <= _DENSE_SIM_MAX else None
        self._PT = self.P.T.tocsr()
        self.popularity.fit(store)
        self._fitted_version = store.version

    def scores(self, store, user_id):
        u = store.user_index.get(int(user_id))
        if u is None or self.Pn.indptr[u] == self.Pn.indptr[u + 1]:
            return None
        if self._S is not None:
            sims = self._S[u].copy()
        else:
            sims = np.asarray((self.Pn @ self.Pn[u].T).todense()).ravel()
        sims[u] = 0.0
        nbrs = np.flatnonzero(sims > 0)
        if nbrs.size == 0:
            return None
        if nbrs.size > self.n_neighbors:
            order = np.argsort(-sims[nbrs], kind="stable")[: self.n_neighbors]
            nbrs = nbrs[order]
        w = np.zeros(self.P.shape[0])
        w[nbrs] = sims[nbrs]
        return self._PT @ w


class ItemCFRecommender(_NeighbourhoodRecommender):
    """Mean cosine similarity to the user's liked items over item co-rating vectors."""

    name = "item_cf"

    def fit(self, store):
        P, _ = store.matrices()
        self.P = P.tocsr()
        self.Qn = _row_normalize(P.T.tocsr()).tocsr()  # item x user, unit rows
        self.popularity.fit(store)
        self._fitted_version = store.version

    def scores(self, store, user_id):
        u = store.user_index.get(int(user_id))
        if u is None:
            return None
        liked = self.P[u].indices
        if liked.size == 0:
            return None
        profile = np.asarray(self.Qn[liked].sum(axis=0)).ravel()
        return (self.Qn @ profile) / liked.size


class MFRecommender(Recommender):
    """Explicit-rating matrix factorization by weighted-lambda ALS.

    Minimizes sum over observed (u, i) of (r_ui - x_u . y_i)^2
    + reg * (sum_u n_u |x_u|^2 + sum_i n_i |y_i|^2); each half-step is an
    exact minimization, so the recorded loss is non-increasing.
    """

    name = "mf"

    def __init__(self, rank: int = 32, reg: float = 0.05, n_iters: int = 15, init_scale: float = 0.1, seed: int = 0):
        self.rank = rank
        self.reg = reg
        self.n_iters = n_iters
        self.init_scale = init_scale
        self.seed = seed
        self.X: np.ndarray | None = None
        self.Y: np.ndarray | None = None
        self.loss_trace: list[float] = []

    def _half_step(self, R: sparse.csr_matrix, W: sparse.csr_matrix, F: np.ndarray) -> np.ndarray:
        r = self.rank
        outer = (F[:, :, None] * F[:, None, :]).reshape(F.shape[0], r * r)
        A = np.asarray(W @ outer).reshape(-1, r, r)
        n = np.asarray(W.sum(axis=1)).ravel()
        A += (self.reg * np.maximum(n, 1.0))[:, None, None] * np.eye(r)
        b = np.asarray(R @ F)
        out = np.linalg.solve(A, b[:, :, None])[:, :, 0]
        out[n == 0] = 0.0
        return out

    def loss(self, R: sparse.csr_matrix) -> float:
        coo = R.tocoo()
        pred = np.sum(self.X[coo.row] * self.Y[coo.col], axis=1)
        n_u = np.asarray((R != 0).sum(axis=1)).ravel()
        n_i = np.asarray((R != 0).sum(axis=0)).ravel()
        return float(np.sum((coo.data - pred) ** 2)
                     + self.reg * (n_u @ np.sum(self.X ** 2, axis=1) + n_i @ np.sum(self.Y ** 2, axis=1)))

    def fit(self, store):
        _, R = store.matrices()
        R = R.tocsr()
        W = (R != 0).astype(float).tocsr()
        rng = np.random.default_rng(self.seed)
        self.X = self.init_scale * rng.standard_normal((R.shape[0], self.rank))
        self.Y = self.init_scale * rng.standard_normal((R.shape[1], self.rank))
        self.loss_trace = []
        if R.nnz == 0:
            return
        RT, WT = R.T.tocsr(), W.T.tocsr()
        # start from the best X for the random Y so that every recorded step is an exact minimization
        self.X = self._half_step(R, W, self.Y)
        self.loss_trace.append(self.loss(R))
        for _ in range(self.n_iters):
            self.Y = self._half_step(RT, WT, self.X)
            self.loss_trace.append(self.loss(R))
            self.X = self._half_step(R, W, self.Y)
            self.loss_trace.append(self.loss(R))

    def scores(self, store, user_id):
        if self.X is None:
            raise TrainingRequiredError("matrix factorization model is not trained; call train_epoch first")
        u = store.user_index.get(int(user_id))
        if u is None:
            return np.zeros(store.item_ids.shape[0])
        return self.Y @ self.X[u]

    def recommend(self, store, user_id, m=1):
        s = self.scores(store, user_id)
        idx = _top_m(s, store.eligible_mask(user_id), m, positive_only=False)
        return Recommendation(user_id, tuple(int(store.item_ids[k]) for k in idx), self.name, fallback=False)


class CandidateSet:
    """The candidate recommenders (the bandit's arms), retrained together."""

    def __init__(self, names: Sequence[str] = RECOMMENDER_NAMES, seed: int = 0, n_neighbors: int = 30,
                 mf_params: dict | None = None):
        unknown = set(names) - set(RECOMMENDER_NAMES)
        if unknown:
            raise ContractViolation(f"unknown recommenders {sorted(unknown)}; choose from {RECOMMENDER_NAMES}")
        pop = PopularityRecommender()
        build = {
            "user_cf": lambda: UserCFRecommender(n_neighbors, pop),
            "item_cf": lambda: ItemCFRecommender(pop),
            "popularity": lambda: pop,
            "mf": lambda: MFRecommender(seed=seed, **(mf_params or {})),
        }
        self.names = tuple(names)
        self.recommenders = [build[n]() for n in self.names]
        self._pop = pop

    def __len__(self) -> int:
        return len(self.recommenders)

    def train(self, store: RatingsStore) -> None:
        self._pop.fit(store)
        for rec in self.recommenders:
            if rec is not self._pop:
                rec.fit(store)

    def recommend_all(self, store: RatingsStore, user_id: int, m: int = 1) -> list[Recommendation]:
        return [rec.recommend(store, user_id, m) for rec in self.recommenders]


def train_epoch(store: RatingsStore, candidates: CandidateSet) -> CandidateSet:
    """Refresh every recommender from the current store."""
    candidates.train(store)
    return candidates


def user_cf_recommend(store: RatingsStore, user_id: int, m: int = 1, n_neighbors: int = 30) -> Recommendation:
    rec = UserCFRecommender(n_neighbors)
    rec.fit(store)
    return rec.recommend(store, user_id, m)


def item_cf_recommend(store: RatingsStore, user_id: int, m: int = 1) -> Recommendation:
    rec = ItemCFRecommender()
    rec.fit(store)
    return rec.recommend(store, user_id, m)


def popularity_recommend(store: RatingsStore, user_id: int, m: int = 1) -> Recommendation:
    rec = PopularityRecommender()
    rec.fit(store)
    return rec.recommend(store, user_id, m)


def mf_recommend(model: MFRecommender, store: RatingsStore, user_id: int, m: int = 1) -> Recommendation:
    return model.recommend(store, user_id, m)
