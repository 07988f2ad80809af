import itertools

import numpy as np
import pytest

from doptrec.data import RatingTable, make_synthetic_movielens, split_initial
from doptrec.errors import ContractViolation, TrainingRequiredError
from doptrec.recommenders import (
    CandidateSet,
    ItemCFRecommender,
    MFRecommender,
    RatingsStore,
    UserCFRecommender,
    item_cf_recommend,
    mf_recommend,
    popularity_recommend,
    train_epoch,
    user_cf_recommend,
)


def store_from(likes: dict[int, list[int]], items=None, dislikes: dict[int, list[int]] | None = None):
    rows = [(u, i, 5) for u, its in likes.items() for i in its]
    rows += [(u, i, 1) for u, its in (dislikes or {}).items() for i in its]
    u, i, r = (np.array(c) for c in zip(*rows))
    return RatingsStore(RatingTable(u, i, r, np.zeros(len(u))), catalog_users=likes.keys(), catalog_items=items)


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


def brute_user_cf(likes, user, items, k=30):
    """Dense reference: cosine over positive vectors, top-k neighbours, weighted votes."""
    users = sorted(likes)
    vec = {u: np.array([1.0 if i in likes[u] else 0.0 for i in items]) for u in users}
    sims = {v: cosine(vec[user], vec[v]) for v in users if v != user}
    nbrs = sorted((v for v in sims if sims[v] > 0), key=lambda v: (-sims[v], users.index(v)))[:k]
    return {i: sum(sims[v] * vec[v][j] for v in nbrs) for j, i in enumerate(items)}


def brute_item_cf(likes, user, items):
    users = sorted(likes)
    col = {i: np.array([1.0 if i in likes[u] else 0.0 for u in users]) for i in items}
    liked = likes[user]
    return {j: np.mean([cosine(col[j], col[i]) for i in liked]) for j in items}


def ranking(scores: dict, blocked: set, m: int):
    ok = [(s, i) for i, s in scores.items() if i not in blocked and s > 1e-12]
    return tuple(i for s, i in sorted(ok, key=lambda t: (-round(t[0], 12), t[1]))[:m])


class TestStore:
    def test_duplicate_rejected(self):
        s = store_from({1: [1]}, items=[1, 2])
        with pytest.raises(ContractViolation):
            s.add(1, 1, 4)

    def test_rejection_disjoint(self):
        s = store_from({1: [1]}, items=[1, 2])
        s.reject(1, 2)
        with pytest.raises(ContractViolation):
            s.add(1, 2, 5)
        with pytest.raises(ContractViolation):
            s.reject(1, 1)
        assert not s.eligible_mask(1).any()

    def test_labels(self):
        s = store_from({1: [1]}, dislikes={1: [2]})
        assert s.label(1, 1) == 1 and s.label(1, 2) == 0 and s.label(1, 3) is None


class TestUserCF:
    def test_perfect_neighbour_transfer(self):
        s = store_from({1: [1, 2, 3], 2: [1, 2, 3, 4]}, items=[1, 2, 3, 4, 5])
        assert user_cf_recommend(s, 1, 1).items == (4,)

    def test_no_shared_items_falls_back(self):
        s = store_from({1: [1], 2: [2], 3: [2, 3]}, items=[1, 2, 3])
        rec = user_cf_recommend(s, 1, 1)
        assert rec.fallback and rec.items == (2,)
        assert rec.recommender_id == "user_cf"

    def test_three_user_toy(self):
        # sim(A, B) = 2 / sqrt(6), sim(A, C) = 0: only B votes, and i3 is B's only new item
        likes = {1: [1, 2], 2: [1, 2, 3], 3: [4]}
        s = store_from(likes)
        assert user_cf_recommend(s, 1, 1).items == (3,)
        scores = brute_user_cf(likes, 1, [1, 2, 3, 4])
        assert scores[3] == pytest.approx(2 / np.sqrt(6))
        assert scores[4] == 0.0

    def test_neighbour_cap(self):
        likes = {0: [1]} | {u: [1, 100 + u] for u in range(1, 41)}
        items = [1] + [100 + u for u in range(1, 41)]
        s = store_from(likes, items=items)
        rec = UserCFRecommender(n_neighbors=30)
        rec.fit(s)
        sc = rec.scores(s, 0)
        # 40 equally similar neighbours, the 30 lowest-index ones vote
        assert np.count_nonzero(sc[[s.item_index[100 + u] for u in range(1, 41)]]) == 30

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        items = list(range(1, 11))
        for _ in range(25):
            likes = {u: sorted(rng.choice(items, size=int(rng.integers(1, 6)), replace=False).tolist())
                     for u in range(1, int(rng.integers(3, 11)))}
            s = store_from(likes, items=items)
            for u in likes:
                expect = ranking(brute_user_cf(likes, u, items), set(likes[u]), 3)
                got = user_cf_recommend(s, u, 3)
                if expect:
                    assert got.items == expect and not got.fallback
                else:
                    assert got.fallback


class TestItemCF:
    def test_similarity_dominance(self):
        # item 3 co-rated with both liked items, item 4 with neither
        s = store_from({1: [1, 2], 2: [1, 2, 3], 3: [1, 3], 4: [4], 5: [2, 3]}, items=[1, 2, 3, 4])
        rec = ItemCFRecommender()
        rec.fit(s)
        sc = rec.scores(s, 1)
        assert sc[s.item_index[3]] > sc[s.item_index[4]]
        assert item_cf_recommend(s, 1, 1).items == (3,)

    def test_singleton_reduction(self):
        likes = {1: [1], 2: [1, 2, 3], 3: [1, 3], 4: [3, 4], 5: [2, 4]}
        s = store_from(likes)
        rec = ItemCFRecommender()
        rec.fit(s)
        sc = rec.scores(s, 1)
        P, _ = s.matrices()
        cols = P.toarray().T
        np.testing.assert_allclose(sc, [cosine(c, cols[0]) for c in cols])

    def test_four_item_oracle(self):
        likes = {1: [1, 2], 2: [2, 3], 3: [1, 3, 4], 4: [4], 5: [1, 2, 4]}
        s = store_from(likes)
        for u in likes:
            got = item_cf_recommend(s, u, 4)
            assert got.items == ranking(brute_item_cf(likes, u, [1, 2, 3, 4]), set(likes[u]), 4)

    def test_random_oracle(self):
        rng = np.random.default_rng(1)
        items = list(range(1, 9))
        for _ in range(20):
            likes = {u: sorted(rng.choice(items, size=int(rng.integers(1, 5)), replace=False).tolist())
                     for u in range(1, int(rng.integers(3, 11)))}
            s = store_from(likes, items=items)
            for u in likes:
                expect = ranking(brute_item_cf(likes, u, items), set(likes[u]), 3)
                got = item_cf_recommend(s, u, 3)
                assert got.items == expect or (not expect and got.fallback)

    def test_cold_user_fallback(self):
        s = store_from({1: [1], 2: [1, 2]}, dislikes={3: [2]}, items=[1, 2, 3])
        assert item_cf_recommend(s, 3, 1).fallback


class TestPopularity:
    def test_count_order(self):
        rows = [(u, 1) for u in range(10)] + [(u, 2) for u in range(5)] + [(0, 3)]
        u, i = zip(*rows)
        s = RatingsStore(RatingTable(np.array(u) + 100, i, [4] * len(u), [0] * len(u)), catalog_users=[1])
        assert popularity_recommend(s, 1, 3).items == (1, 2, 3)
        assert popularity_recommend(s, 100, 3).items == ()  # user 100 rated everything

    def test_consumed_top_item(self):
        s = store_from({1: [1], 2: [1, 2], 3: [1, 2], 4: [3]})
        assert popularity_recommend(s, 1, 1).items == (2,)

    def test_ties_lower_index(self):
        s = store_from({1: [5], 2: [3], 3: [4]})
        assert popularity_recommend(s, 1, 2).items == (3, 4)

    def test_empty_store(self):
        s = RatingsStore(None, catalog_users=[1], catalog_items=[1, 2])
        rec = popularity_recommend(s, 1, 1)
        assert rec.items == () and rec.fallback


class TestMF:
    def test_untrained(self):
        with pytest.raises(TrainingRequiredError):
            mf_recommend(MFRecommender(), store_from({1: [1]}), 1)

    def test_rank_one_recovery(self):
        rng = np.random.default_rng(2)
        n_u, n_i = 80, 25
        a = rng.uniform(0.8, 1.2, n_u)
        b = np.linspace(1.0, 4.5, n_i)[rng.permutation(n_i)]
        obs = rng.random((n_u, n_i)) < 0.5
        uu, ii = np.nonzero(obs)
        s = RatingsStore(None, catalog_users=range(1, n_u + 1), catalog_items=range(1, n_i + 1))
        for u, i in zip(uu, ii):
            s.add(u + 1, i + 1, a[u] * b[i])
        mf = MFRecommender(seed=0)
        mf.fit(s)
        agree = 0
        for u in range(n_u):
            elig = np.flatnonzero(~obs[u])
            if elig.size == 0:
                continue
            rec = mf.recommend(s, u + 1, 1).items[0]
            agree += b[rec - 1] == b[elig].max()
        assert agree / n_u >= 0.95

    def test_zero_factor_deterministic(self):
        s = store_from({1: [1, 2], 2: [2, 3]}, items=[1, 2, 3, 4, 5])
        mf = MFRecommender(rank=3, seed=0)
        mf.fit(s)
        mf.X[0] = 0.0
        assert mf.recommend(s, 1, 3).items == (3, 4, 5)

    def test_identical_users(self):
        s = store_from({1: [1, 2], 2: [1, 2], 3: [2, 3]}, items=[1, 2, 3, 4])
        mf = MFRecommender(rank=4, seed=1)
        mf.fit(s)
        np.testing.assert_allclose(mf.scores(s, 1), mf.scores(s, 2), atol=1e-12)

    def test_loss_non_increasing(self):
        data = make_synthetic_movielens(n_users=120, n_movies=80, seed=3)
        s = RatingsStore(data.ratings)
        mf = MFRecommender(seed=4)
        mf.fit(s)
        assert len(mf.loss_trace) == 2 * mf.n_iters + 1
        assert np.all(np.diff(mf.loss_trace) <= 1e-9 * mf.loss_trace[0])


class TestTrainEpoch:
    @pytest.fixture
    def world(self):
        data = make_synthetic_movielens(n_users=60, n_movies=70, seed=5)
        train, _ = split_initial(data.ratings, 0.3, seed=0)
        return RatingsStore(train, catalog_users=data.users, catalog_items=data.movies)

    def test_deterministic(self, world):
        recs = []
        for _ in range(2):
            cs = train_epoch(world, CandidateSet(seed=7))
            recs.append([cs.recommend_all(world, u, 3) for u in world.user_ids[:20].tolist()])
        assert recs[0] == recs[1]

    def test_eligibility(self, world):
        cs = train_epoch(world, CandidateSet(seed=0))
        for u in world.user_ids.tolist():
            blocked = world.history(u) | world.rejected(u)
            for rec in cs.recommend_all(world, u, 5):
                assert len(set(rec.items)) == len(rec.items) <= 5
                assert not blocked & set(rec.items)

    def test_new_positive_keeps_item_eligible_elsewhere(self, world):
        u, v = world.user_ids[:2].tolist()
        item = next(i for i in world.item_ids.tolist() if (u, i) not in world and (v, i) not in world)
        world.add(u, item, 5)
        assert world.eligible_mask(v)[world.item_index[item]]

    def test_unknown_recommender(self):
        with pytest.raises(ContractViolation):
            CandidateSet(["svd"])
