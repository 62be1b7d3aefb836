"""Catalogs, interaction logs, filtering, splitting and synthetic data."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CATEGORIES = ("genre", "developer", "publisher")
CATALOG_HEADER = ["game_id", "genres", "developers", "publishers"]
INTERACTIONS_HEADER = ["user_id", "game_id"]
SPLIT_SUFFIXES = (".train.csv", ".val.csv", ".test.csv")


class DataError(ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """Invalid configuration values."""


@dataclass(frozen=True)
class GameCatalog:
    game_ids: tuple[str, ...]
    genres: tuple[frozenset, ...]
    developers: tuple[frozenset, ...]
    publishers: tuple[frozenset, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.game_ids)
        if not (len(self.genres) == len(self.developers) == len(self.publishers) == n):
            raise DataError("label columns do not match number of games")
        index = {}
        for i, gid in enumerate(self.game_ids):
            if gid in index:
                raise DataError(f"duplicate game id {gid!r}")
            index[gid] = i
        object.__setattr__(self, "index", index)

    @classmethod
    def from_rows(cls, rows):
        """Build from ``(game_id, genres, developers, publishers)`` tuples of label iterables."""
        rows = list(rows)
        return cls(
            tuple(r[0] for r in rows),
            tuple(frozenset(r[1]) for r in rows),
            tuple(frozenset(r[2]) for r in rows),
            tuple(frozenset(r[3]) for r in rows),
        )

    def __len__(self):
        return len(self.game_ids)

    @property
    def num_games(self):
        return len(self.game_ids)

    def labels(self, category):
        if category == "genre":
            return self.genres
        if category == "developer":
            return self.developers
        if category == "publisher":
            return self.publishers
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")


@dataclass(frozen=True)
class InteractionLog:
    """Deduplicated (user, game) pairs, stored sorted by user then game."""

    user_ids: tuple[str, ...]
    num_games: int
    users: np.ndarray
    games: np.ndarray

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        games = np.asarray(self.games, dtype=np.int64)
        if users.shape != games.shape or users.ndim != 1:
            raise DataError("users and games must be 1-d arrays of equal length")
        if len(users):
            if users.min() < 0 or users.max() >= len(self.user_ids):
                raise DataError("user index out of range")
            if games.min() < 0 or games.max() >= self.num_games:
                raise DataError("game index out of range")
            key = users * max(self.num_games, 1) + games
            key, first = np.unique(key, return_index=True)
            users, games = users[first], games[first]
        users.setflags(write=False)
        games.setflags(write=False)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "games", games)

    @property
    def num_users(self):
        return len(self.user_ids)

    def __len__(self):
        return len(self.users)

    def pairs(self):
        return set(zip(self.users.tolist(), self.games.tolist()))

    def user_counts(self):
        return np.bincount(self.users, minlength=self.num_users)

    def items_by_user(self):
        """List of sorted game-index arrays, one per user."""
        bounds = np.searchsorted(self.users, np.arange(self.num_users + 1))
        return [self.games[bounds[u]:bounds[u + 1]] for u in range(self.num_users)]

    def with_pairs(self, users, games):
        return InteractionLog(self.user_ids, self.num_games, users, games)


@dataclass(frozen=True)
class SplitLog:
    train: InteractionLog
    val: InteractionLog
    test: InteractionLog


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 1000
    num_games: int = 200
    num_genres: int = 20
    num_developers: int = 60
    num_publishers: int = 40
    zipf_exponent: float = 1.0
    interactions_per_user: float = 20.0
    seed: int = 0
    genre_bias: float = 0.7

    def validate(self):
        for name in ("num_users", "num_games", "num_genres", "num_developers", "num_publishers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.zipf_exponent > 0:
            raise ConfigError("zipf_exponent must be > 0")
        if self.interactions_per_user < 1:
            raise ConfigError("interactions_per_user must be >= 1")
        if self.interactions_per_user > self.num_games:
            raise ConfigError("interactions_per_user must not exceed num_games")
        if not 0.0 <= self.genre_bias <= 1.0:
            raise ConfigError("genre_bias must lie in [0, 1]")


def _split_labels(cell):
    return frozenset(s.strip() for s in cell.split(";") if s.strip())


def _data_lines(fh):
    """Yield ``(line_number, text)`` skipping blank and ``#`` comment lines."""
    for lineno, line in enumerate(fh, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield lineno, line


def _csv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        numbered = list(_data_lines(fh))
    reader = csv.reader(text for _, text in numbered)
    for (lineno, _), row in zip(numbered, reader):
        yield lineno, row


def load_catalog(path) -> GameCatalog:
    rows = _csv_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise DataError(f"{path}: missing header") from None
    if [h.strip() for h in header] != CATALOG_HEADER:
        raise DataError(f"expected header {','.join(CATALOG_HEADER)}", lineno)
    seen = set()
    parsed = []
    for lineno, row in rows:
        if len(row) != 4:
            raise DataError(f"expected 4 fields, got {len(row)}", lineno)
        gid = row[0].strip()
        if not gid:
            raise DataError("empty game_id", lineno)
        if gid in seen:
            raise DataError(f"duplicate game id {gid!r}", lineno)
        seen.add(gid)
        parsed.append((gid, _split_labels(row[1]), _split_labels(row[2]), _split_labels(row[3])))
    return GameCatalog.from_rows(parsed)


def load_interactions(path, catalog: GameCatalog) -> InteractionLog:
    rows = _csv_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        return InteractionLog((), catalog.num_games, [], [])
    header = [h.strip() for h in header]
    try:
        ucol, gcol = header.index("user_id"), header.index("game_id")
    except ValueError:
        raise DataError("header must contain user_id and game_id", lineno) from None
    user_index: dict[str, int] = {}
    users, games = [], []
    for lineno, row in rows:
        if len(row) <= max(ucol, gcol):
            raise DataError(f"expected at least {max(ucol, gcol) + 1} fields", lineno)
        uid, gid = row[ucol].strip(), row[gcol].strip()
        if gid not in catalog.index:
            raise DataError(f"unknown game id {gid!r}", lineno)
        users.append(user_index.setdefault(uid, len(user_index)))
        games.append(catalog.index[gid])
    return InteractionLog(tuple(user_index), catalog.num_games, users, games)


def write_catalog(catalog: GameCatalog, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATALOG_HEADER)
        for i, gid in enumerate(catalog.game_ids):
            w.writerow([gid] + [";".join(sorted(catalog.labels(c)[i])) for c in CATEGORIES])


def write_interactions(log: InteractionLog, catalog: GameCatalog, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERACTIONS_HEADER)
        for u, i in zip(log.users.tolist(), log.games.tolist()):
            w.writerow([log.user_ids[u], catalog.game_ids[i]])


def apply_user_5core(log: InteractionLog, k: int = 5) -> InteractionLog:
    """Drop users with fewer than ``k`` interactions (one pass, games untouched)."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    keep = log.user_counts() >= k
    new_index = np.cumsum(keep) - 1
    mask = keep[log.users]
    user_ids = tuple(uid for uid, kept in zip(log.user_ids, keep) if kept)
    return InteractionLog(user_ids, log.num_games, new_index[log.users[mask]], log.games[mask])


def _floor(x):
    return math.floor(round(x, 9))


def _ceil(x):
    return math.ceil(round(x, 9))


def split_interactions(log: InteractionLog, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitLog:
    """Per-user shuffled split: ceil(train share), floor(val share), rest to test."""
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must be three positive numbers summing to 1")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for u, items in enumerate(log.items_by_user()):
        n = len(items)
        if n == 0:
            continue
        shuffled = items[rng.permutation(n)]
        n_train = max(1, _ceil(ratios[0] * n))
        n_val = min(_floor(ratios[1] * n), n - n_train)
        parts[0].append((u, shuffled[:n_train]))
        parts[1].append((u, shuffled[n_train:n_train + n_val]))
        parts[2].append((u, shuffled[n_train + n_val:]))

    def assemble(chunks):
        if not chunks:
            return log.with_pairs([], [])
        users = np.concatenate([np.full(len(g), u, dtype=np.int64) for u, g in chunks])
        games = np.concatenate([g for _, g in chunks])
        return log.with_pairs(users, games)

    return SplitLog(*(assemble(p) for p in parts))


def write_split(split: SplitLog, catalog: GameCatalog, prefix):
    prefix = str(prefix)
    for log, suffix in zip((split.train, split.val, split.test), SPLIT_SUFFIXES):
        write_interactions(log, catalog, prefix + suffix)


def load_split(prefix, catalog: GameCatalog) -> SplitLog:
    """Read the three split files and put them on a shared user index (train order)."""
    prefix = str(prefix)
    logs = [load_interactions(prefix + s, catalog) for s in SPLIT_SUFFIXES]
    user_ids = list(logs[0].user_ids)
    index = {uid: n for n, uid in enumerate(user_ids)}
    for log, suffix in zip(logs[1:], SPLIT_SUFFIXES[1:]):
        for uid in log.user_ids:
            if uid not in index:
                raise DataError(f"user {uid!r} in {prefix + suffix} has no training interactions")
    out = []
    for log in logs:
        remap = np.array([index[uid] for uid in log.user_ids], dtype=np.int64)
        users = remap[log.users] if len(log) else np.zeros(0, dtype=np.int64)
        out.append(InteractionLog(tuple(user_ids), catalog.num_games, users, log.games))
    return SplitLog(*out)


def generate_synthetic(cfg: SynthConfig):
    """Return ``(catalog, log)`` with Zipf game popularity and per-user genre taste."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_games = cfg.num_games
    genre = rng.integers(cfg.num_genres, size=n_games)
    dev = rng.integers(cfg.num_developers, size=n_games)
    pub = rng.integers(cfg.num_publishers, size=n_games)
    catalog = GameCatalog.from_rows(
        (f"g{i}", {f"genre{genre[i]}"}, {f"dev{dev[i]}"}, {f"pub{pub[i]}"}) for i in range(n_games)
    )
    # popularity rank is shuffled so it is unrelated to the game index
    ranks = rng.permutation(n_games) + 1
    popularity = ranks.astype(np.float64) ** -cfg.zipf_exponent

    users, games = [], []
    for u in range(cfg.num_users):
        preferred = rng.integers(cfg.num_genres)
        n_u = int(np.clip(rng.poisson(cfg.interactions_per_user), 1, n_games))
        available = np.ones(n_games, dtype=bool)
        in_pref = genre == preferred
        for _ in range(n_u):
            pool = available & in_pref if rng.random() < cfg.genre_bias else available
            if not pool.any():
                pool = available
            weights = np.where(pool, popularity, 0.0)
            choice = int(rng.choice(n_games, p=weights / weights.sum()))
            available[choice] = False
            users.append(u)
            games.append(choice)
    user_ids = tuple(f"u{u}" for u in range(cfg.num_users))
    return catalog, InteractionLog(user_ids, n_games, users, games)
