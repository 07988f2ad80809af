"""MovieLens-1M ingestion, label binarization, initial splits and context features.

The loader reads the "::"-separated ``ratings.dat``, ``users.dat`` and
``movies.dat`` files (latin-1 encoded).  Ratings are held column-wise in a
``RatingTable``; indexing a row yields a ``RawRating``.

Context features concatenate a user block (one-hot gender, age code and
occupation), a movie genre block (multi-hot) and a signed feature-hashing
projection of the title.  Every block carries one extra "missing" column that
is set, with the rest of the block left at zero, when metadata is absent.

``make_synthetic_movielens`` produces data in the same layout from a seeded
generative model, for tests and for machines without the real dataset.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractViolation, ParseError

GENDERS = ("F", "M")
AGE_CODES = (1, 18, 25, 35, 45, 50, 56)
N_OCCUPATIONS = 21
GENRES = ("Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama",
          "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller",
          "War", "Western")
POSITIVE_THRESHOLD = 2.5
_TOKEN = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class RawRating:
    user_id: int
    movie_id: int
    rating: int
    timestamp: int

    def __post_init__(self) -> None:
        if not 1 <= self.rating <= 5:
            raise ContractViolation(f"rating must be in 1..5, got {self.rating}")
        if self.user_id <= 0 or self.movie_id <= 0:
            raise ContractViolation("ids must be positive")


@dataclass(frozen=True)
class UserMeta:
    gender: str
    age: int
    occupation: int
    zip_code: str = ""


@dataclass(frozen=True)
class MovieMeta:
    title: str
    genres: tuple[str, ...]


@dataclass
class RatingTable:
    """Column store of rating records."""

    user: np.ndarray
    movie: np.ndarray
    rating: np.ndarray
    timestamp: np.ndarray

    def __post_init__(self) -> None:
        self.user = np.asarray(self.user, dtype=np.int64)
        self.movie = np.asarray(self.movie, dtype=np.int64)
        self.rating = np.asarray(self.rating, dtype=np.int64)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        n = self.user.shape[0]
        if not (self.movie.shape[0] == self.rating.shape[0] == self.timestamp.shape[0] == n):
            raise ContractViolation("rating columns differ in length")

    @classmethod
    def from_records(cls, records: Sequence[RawRating]) -> "RatingTable":
        cols = np.array([(r.user_id, r.movie_id, r.rating, r.timestamp) for r in records],
                        dtype=np.int64).reshape(-1, 4)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3])

    def __len__(self) -> int:
        return int(self.user.shape[0])

    def __getitem__(self, i: int) -> RawRating:
        return RawRating(int(self.user[i]), int(self.movie[i]), int(self.rating[i]), int(self.timestamp[i]))

    def __iter__(self) -> Iterator[RawRating]:
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "RatingTable":
        idx = np.asarray(idx)
        return RatingTable(self.user[idx], self.movie[idx], self.rating[idx], self.timestamp[idx])

    def labels(self) -> np.ndarray:
        return (self.rating >= POSITIVE_THRESHOLD).astype(np.int8)


@dataclass
class MovieLensData:
    ratings: RatingTable
    users: dict[int, UserMeta] = field(default_factory=dict)
    movies: dict[int, MovieMeta] = field(default_factory=dict)

    def subsample_users(self, n_users: int, seed: int = 0) -> "MovieLensData":
        """Keep ``n_users`` random users with all their ratings."""
        ids = np.unique(self.ratings.user)
        if n_users >= ids.size:
            return self
        keep = np.sort(np.random.default_rng(seed).choice(ids, size=n_users, replace=False))
        rows = np.flatnonzero(np.isin(self.ratings.user, keep))
        users = {u: self.users[u] for u in keep.tolist() if u in self.users}
        return MovieLensData(self.ratings.take(rows), users, dict(self.movies))


# ---------------------------------------------------------------------------
# loading


def _fields(line: str, n: int, path: str, lineno: int) -> list[str]:
    parts = line.split("::")
    if len(parts) != n:
        raise ParseError(f"{path}:{lineno}: expected {n} '::'-separated fields, got {len(parts)}", path, lineno)
    return parts


def _int(s: str, what: str, path: str, lineno: int) -> int:
    try:
        return int(s)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: {what} {s!r} is not an integer", path, lineno) from None


def _lines(path: Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="latin-1") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if line.strip():
                yield lineno, line


def parse_rating_line(line: str, path: str = "<string>", lineno: int = 1) -> RawRating:
    u, m, r, t = _fields(line.strip(), 4, path, lineno)
    rating = _int(r, "rating", path, lineno)
    if not 1 <= rating <= 5:
        raise ParseError(f"{path}:{lineno}: rating {rating} outside 1..5", path, lineno)
    return RawRating(_int(u, "user id", path, lineno), _int(m, "movie id", path, lineno), rating,
                     _int(t, "timestamp", path, lineno))


def load_ratings(path) -> RatingTable:
    path = Path(path)
    rows = []
    for lineno, line in _lines(path):
        r = parse_rating_line(line, str(path), lineno)
        rows.append((r.user_id, r.movie_id, r.rating, r.timestamp))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return RatingTable(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def load_users(path) -> dict[int, UserMeta]:
    path = Path(path)
    out = {}
    for lineno, line in _lines(path):
        u, g, a, o, z = _fields(line, 5, str(path), lineno)
        out[_int(u, "user id", str(path), lineno)] = UserMeta(
            g, _int(a, "age", str(path), lineno), _int(o, "occupation", str(path), lineno), z)
    return out


def load_movies(path) -> dict[int, MovieMeta]:
    path = Path(path)
    out = {}
    for lineno, line in _lines(path):
        m, title, genres = _fields(line, 3, str(path), lineno)
        out[_int(m, "movie id", str(path), lineno)] = MovieMeta(title, tuple(g for g in genres.split("|") if g))
    return out


def load_movielens(path) -> MovieLensData:
    """Read a MovieLens-1M style directory; missing files raise FileNotFoundError."""
    root = Path(path)
    return MovieLensData(load_ratings(root / "ratings.dat"), load_users(root / "users.dat"),
                         load_movies(root / "movies.dat"))


def write_movielens(data: MovieLensData, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "ratings.dat", "w", encoding="latin-1") as fh:
        for u, m, r, t in zip(data.ratings.user, data.ratings.movie, data.ratings.rating, data.ratings.timestamp):
            fh.write(f"{u}::{m}::{r}::{t}\n")
    with open(root / "users.dat", "w", encoding="latin-1") as fh:
        for u, meta in sorted(data.users.items()):
            fh.write(f"{u}::{meta.gender}::{meta.age}::{meta.occupation}::{meta.zip_code}\n")
    with open(root / "movies.dat", "w", encoding="latin-1") as fh:
        for m, meta in sorted(data.movies.items()):
            fh.write(f"{m}::{meta.title}::{'|'.join(meta.genres)}\n")
    return root


# ---------------------------------------------------------------------------
# labels and splits


def binarize(rating) -> int:
    """1 iff rating >= 2.5."""
    if not 1 <= rating <= 5:
        raise ContractViolation(f"rating must lie in 1..5, got {rating}")
    return int(rating >= POSITIVE_THRESHOLD)


def split_initial(ratings, fraction: float, seed: int = 0):
    """Uniform random split by record; the train part has max(1, floor(fraction * N)) rows.

    Accepts a ``RatingTable`` (returns tables) or a sequence (returns lists);
    both parts keep the input order.
    """
    if not 0.0 < fraction < 1.0:
        raise ContractViolation(f"fraction must lie in (0, 1), got {fraction}")
    n = len(ratings)
    if n == 0:
        return (ratings.take([]), ratings.take([])) if isinstance(ratings, RatingTable) else ([], [])
    n_train = max(1, math.floor(fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[np.random.default_rng(seed).permutation(n)[:n_train]] = True
    if isinstance(ratings, RatingTable):
        return ratings.take(np.flatnonzero(mask)), ratings.take(np.flatnonzero(~mask))
    return [r for r, m in zip(ratings, mask) if m], [r for r, m in zip(ratings, mask) if not m]


# ---------------------------------------------------------------------------
# features


def hash_title(title: str, dims: int = 50) -> np.ndarray:
    """Signed feature hashing of lowercase alphanumeric tokens, unit-normalized.

    Each token's 8-byte blake2b digest picks a bucket (low 63 bits mod dims)
    and a sign (top bit), so the result is platform independent.
    """
    if dims < 1:
        raise ContractViolation("title_dims must be >= 1")
    v = np.zeros(dims)
    for tok in _TOKEN.findall(title.lower()):
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "big")
        v[(h & ((1 << 63) - 1)) % dims] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


@dataclass(frozen=True)
class FeatureMapConfig:
    user_fields: tuple[str, ...] = ("gender", "age", "occupation")
    include_genres: bool = True
    title_dims: int = 50
    include_user_context: bool = True

    def __post_init__(self) -> None:
        if self.title_dims < 1:
            raise ContractViolation("title_dims must be >= 1")
        bad = set(self.user_fields) - {"gender", "age", "occupation"}
        if bad:
            raise ContractViolation(f"unknown user fields {sorted(bad)}")

    @property
    def user_dim(self) -> int:
        widths = {"gender": len(GENDERS), "age": len(AGE_CODES), "occupation": N_OCCUPATIONS}
        return sum(widths[f] + 1 for f in self.user_fields)

    @property
    def movie_dim(self) -> int:
        return (len(GENRES) + 1 if self.include_genres else 0) + self.title_dims + 1

    @property
    def d(self) -> int:
        return self.user_dim + self.movie_dim


def _one_hot(value, vocab: Sequence) -> np.ndarray:
    """Vocabulary one-hot plus a trailing missing indicator."""
    out = np.zeros(len(vocab) + 1)
    try:
        out[list(vocab).index(value)] = 1.0
    except ValueError:
        out[-1] = 1.0
    return out


def user_block(config: FeatureMapConfig, meta: UserMeta | None) -> np.ndarray:
    if not config.include_user_context:
        return np.zeros(config.user_dim)
    parts = []
    for f in config.user_fields:
        if f == "gender":
            parts.append(_one_hot(meta.gender if meta else None, GENDERS))
        elif f == "age":
            parts.append(_one_hot(meta.age if meta else None, AGE_CODES))
        else:
            parts.append(_one_hot(meta.occupation if meta else None, range(N_OCCUPATIONS)))
    return np.concatenate(parts) if parts else np.zeros(0)


def movie_block(config: FeatureMapConfig, meta: MovieMeta | None) -> np.ndarray:
    parts = []
    if config.include_genres:
        g = np.zeros(len(GENRES) + 1)
        if meta is None:
            g[-1] = 1.0
        else:
            for name in meta.genres:
                if name in GENRES:
                    g[GENRES.index(name)] = 1.0
            if not g.any():
                g[-1] = 1.0
        parts.append(g)
    t = np.zeros(config.title_dims + 1)
    if meta is None:
        t[-1] = 1.0
    else:
        t[:-1] = hash_title(meta.title, config.title_dims)
    parts.append(t)
    return np.concatenate(parts)


def build_features(config: FeatureMapConfig, user_meta: UserMeta | None, movie_meta: MovieMeta | None) -> np.ndarray:
    """[user one-hots | genre multi-hot | title hash], each block with a missing column."""
    return np.concatenate([user_block(config, user_meta), movie_block(config, movie_meta)])


class FeatureMap:
    """Cached feature construction over a metadata catalog."""

    def __init__(self, config: FeatureMapConfig, users: dict[int, UserMeta], movies: dict[int, MovieMeta]):
        self.config = config
        self.users = users
        self.movies = movies
        self._ucache: dict[int, np.ndarray] = {}
        self._mcache: dict[int, np.ndarray] = {}

    @property
    def d(self) -> int:
        return self.config.d

    def user(self, user_id: int) -> np.ndarray:
        v = self._ucache.get(user_id)
        if v is None:
            v = self._ucache[user_id] = user_block(self.config, self.users.get(user_id))
        return v

    def movie(self, movie_id: int) -> np.ndarray:
        v = self._mcache.get(movie_id)
        if v is None:
            v = self._mcache[movie_id] = movie_block(self.config, self.movies.get(movie_id))
        return v

    def __call__(self, user_id: int, movie_id: int) -> np.ndarray:
        return np.concatenate([self.user(user_id), self.movie(movie_id)])


# ---------------------------------------------------------------------------
# synthetic data in the MovieLens layout

_WORDS = ("night", "love", "war", "star", "city", "dark", "river", "king", "ghost", "summer", "lost", "game",
          "blue", "heart", "road", "secret", "world", "last", "dream", "fire", "house", "time", "wild", "man")


def make_synthetic_movielens(n_users: int = 500, n_movies: int = 400, ratings_per_user: int = 40,
                             seed: int = 0) -> MovieLensData:
    """Seeded MovieLens-like data with demographic genre tastes and skewed popularity.

    Each demographic group (gender x age code) has a genre taste vector; a
    user's affinity for a movie is their group taste over its genres plus
    individual noise.  Users rate movies drawn with probability proportional
    to popularity x exp(affinity), and the rating grows with affinity, so
    popularity, neighbourhood and content signals all carry information.
    """
    rng = np.random.default_rng(seed)
    G = len(GENRES)
    movies = {}
    movie_genres = np.zeros((n_movies, G))
    for j in range(n_movies):
        gs = rng.choice(G, size=int(rng.integers(1, 4)), replace=False)
        movie_genres[j, gs] = 1.0
        words = " ".join(str(w).title() for w in rng.choice(_WORDS, size=int(rng.integers(1, 4))))
        movies[j + 1] = MovieMeta(f"{words} ({int(rng.integers(1930, 2001))})", tuple(GENRES[g] for g in sorted(gs)))
    popularity = rng.zipf(1.6, size=n_movies).astype(float)
    popularity = np.minimum(popularity, 200.0) / 200.0 + 0.02

    group_taste = rng.normal(0.0, 1.0, size=(len(GENDERS), len(AGE_CODES), G))
    users = {}
    user_rows, movie_rows, rating_rows, ts_rows = [], [], [], []
    for u in range(1, n_users + 1):
        gi, ai = int(rng.integers(len(GENDERS))), int(rng.integers(len(AGE_CODES)))
        users[u] = UserMeta(GENDERS[gi], AGE_CODES[ai], int(rng.integers(N_OCCUPATIONS)), f"{rng.integers(10**5):05d}")
        taste = group_taste[gi, ai] + 0.5 * rng.normal(size=G)
        affinity = movie_genres @ taste / np.maximum(movie_genres.sum(axis=1), 1.0)
        p = popularity * np.exp(1.5 * affinity)
        n_r = min(n_movies, max(5, int(rng.poisson(ratings_per_user))))
        picks = rng.choice(n_movies, size=n_r, replace=False, p=p / p.sum())
        raw = 3.0 + 1.3 * affinity[picks] + rng.normal(0.0, 0.8, size=n_r)
        user_rows.extend([u] * n_r)
        movie_rows.extend((picks + 1).tolist())
        rating_rows.extend(np.clip(np.rint(raw), 1, 5).astype(int).tolist())
        ts_rows.extend((978300000 + rng.integers(0, 10**6, size=n_r)).tolist())
    table = RatingTable(np.array(user_rows), np.array(movie_rows), np.array(rating_rows), np.array(ts_rows))
    return MovieLensData(table, users, movies)
