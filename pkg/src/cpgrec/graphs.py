"""Game graphs, the player-game bipartite graph and popularity reweighting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .data import CATEGORIES, ConfigError, DataError, GameCatalog, InteractionLog


@dataclass(frozen=True)
class SparseGraph:
    """Weighted adjacency in CSR form. Columns are strictly increasing per row."""

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    symmetric: bool = True

    @classmethod
    def from_edges(cls, num_nodes, src, dst, weights=None, symmetric=True):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
        keep = src != dst
        src, dst, w = src[keep], dst[keep], w[keep]
        if symmetric:
            src, dst, w = np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([w, w])
        key = src * num_nodes + dst
        # duplicates keep the first weight
        key, first = np.unique(key, return_index=True)
        rows, cols, w = key // max(num_nodes, 1), key % max(num_nodes, 1), w[first]
        indptr = np.searchsorted(rows, np.arange(num_nodes + 1)).astype(np.int64)
        return cls(num_nodes, indptr, cols.astype(np.int64), w.astype(np.float64), symmetric)

    @classmethod
    def empty(cls, num_nodes):
        return cls.from_edges(num_nodes, [], [])

    @property
    def nnz(self):
        return len(self.indices)

    @property
    def num_edges(self):
        """Undirected edge count for symmetric graphs, stored entries otherwise."""
        return self.nnz // 2 if self.symmetric else self.nnz

    def degrees(self):
        return np.diff(self.indptr)

    def rows(self):
        return np.repeat(np.arange(self.num_nodes), self.degrees())

    def edge_keys(self):
        """Sorted ``a * n + b`` codes of the undirected edges with ``a < b``."""
        rows = self.rows()
        upper = rows < self.indices
        return rows[upper] * self.num_nodes + self.indices[upper]

    def edge_set(self):
        n = self.num_nodes
        return {(int(k // n), int(k % n)) for k in self.edge_keys()}

    def with_data(self, data):
        return SparseGraph(self.num_nodes, self.indptr, self.indices, np.asarray(data, dtype=np.float64),
                           self.symmetric)

    def to_dense(self):
        out = np.zeros((self.num_nodes, self.num_nodes))
        out[self.rows(), self.indices] = self.data
        return out


def _from_keys(num_nodes, keys):
    keys = np.asarray(keys, dtype=np.int64)
    return SparseGraph.from_edges(num_nodes, keys // max(num_nodes, 1), keys % max(num_nodes, 1))


def build_raw_graph(catalog: GameCatalog, category: str) -> SparseGraph:
    """Connect every pair of games whose label sets of ``category`` intersect."""
    n = catalog.num_games
    members: dict[str, list[int]] = {}
    for i, labels in enumerate(catalog.labels(category)):
        for label in labels:
            members.setdefault(label, []).append(i)
    chunks = []
    for games in members.values():
        if len(games) < 2:
            continue
        g = np.asarray(games, dtype=np.int64)
        a, b = np.triu_indices(len(g), k=1)
        chunks.append(g[a] * n + g[b])
    keys = np.unique(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
    return _from_keys(n, keys)


def build_strict_graph(catalog: GameCatalog, cat_a: str, cat_b: str, raw=None) -> SparseGraph:
    """Edges present in both raw graphs (games sharing labels of two category types)."""
    if cat_a == cat_b:
        raise ValueError("strict graphs need two distinct categories")
    raw = raw or {}
    ga = raw.get(cat_a) or build_raw_graph(catalog, cat_a)
    gb = raw.get(cat_b) or build_raw_graph(catalog, cat_b)
    return _from_keys(catalog.num_games, np.intersect1d(ga.edge_keys(), gb.edge_keys()))


def build_connectivity_graph(catalog: GameCatalog, raw=None) -> SparseGraph:
    """Edges between games that share exactly one of the three category types."""
    raw = raw or {}
    keys = np.concatenate([(raw.get(c) or build_raw_graph(catalog, c)).edge_keys() for c in CATEGORIES])
    uniq, counts = np.unique(keys, return_counts=True)
    return _from_keys(catalog.num_games, uniq[counts == 1])


STRICT_PAIRS = tuple(combinations(CATEGORIES, 2))


def build_game_graphs(catalog: GameCatalog):
    """All seven game graphs: raw per category, three strict, and connectivity."""
    raw = {c: build_raw_graph(catalog, c) for c in CATEGORIES}
    strict = {(a, b): build_strict_graph(catalog, a, b, raw) for a, b in STRICT_PAIRS}
    return raw, strict, build_connectivity_graph(catalog, raw)


@dataclass(frozen=True)
class BipartiteGraph:
    num_users: int
    num_games: int
    adjacency: SparseGraph
    user_indptr: np.ndarray
    user_games: np.ndarray
    game_indptr: np.ndarray
    game_users: np.ndarray

    def user_degrees(self):
        return np.diff(self.user_indptr)

    def game_degrees(self):
        return np.diff(self.game_indptr)

    @property
    def num_edges(self):
        return len(self.user_games)


def build_bipartite(train: InteractionLog) -> BipartiteGraph:
    """Player-game graph; users occupy nodes ``0..U-1`` and games ``U..U+I-1``."""
    if len(train) == 0:
        raise DataError("cannot build a bipartite graph from an empty training log")
    nu, ni = train.num_users, train.num_games
    users, games = train.users, train.games  # sorted by (user, game)
    adjacency = SparseGraph.from_edges(nu + ni, users, games + nu)
    user_indptr = np.searchsorted(users, np.arange(nu + 1)).astype(np.int64)
    order = np.lexsort((users, games))
    game_indptr = np.searchsorted(games[order], np.arange(ni + 1)).astype(np.int64)
    return BipartiteGraph(nu, ni, adjacency, user_indptr, games.copy(), game_indptr, users[order])


@dataclass(frozen=True)
class PopularitySets:
    hot: frozenset
    cold: frozenset
    player_count: np.ndarray


def popularity_sets(train: InteractionLog, quantile: float = 0.2) -> PopularitySets:
    """Top and bottom ``quantile`` of games by distinct-player count in ``train``.

    Ties: descending count, then ascending game index.
    """
    if not 0 < quantile < 0.5:
        raise ConfigError("quantile must lie in (0, 0.5)")
    n = train.num_games
    counts = np.bincount(train.games, minlength=n)
    order = np.lexsort((np.arange(n), -counts))
    size = math.floor(round(quantile * n, 9))
    hot = frozenset(order[:size].tolist())
    cold = frozenset(order[n - size:].tolist()) if size else frozenset()
    return PopularitySets(hot, cold, counts)


@dataclass(frozen=True)
class ThetaConfig:
    theta_e_hot: float = 30.0
    theta_n_hot: float = 0.5
    theta_n_cold: float = 5.0

    def __post_init__(self):
        for name in ("theta_e_hot", "theta_n_hot", "theta_n_cold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")

    @classmethod
    def unit(cls):
        return cls(1.0, 1.0, 1.0)


def theta_e(i, pop: PopularitySets, cfg: ThetaConfig) -> float:
    return cfg.theta_e_hot if i in pop.hot else 1.0


def theta_n(i, pop: PopularitySets, cfg: ThetaConfig) -> float:
    if i in pop.hot:
        return cfg.theta_n_hot
    if i in pop.cold:
        return cfg.theta_n_cold
    return 1.0


def theta_arrays(pop: PopularitySets, cfg: ThetaConfig):
    """Vectorised ``(theta_e, theta_n)`` over all games."""
    n = len(pop.player_count)
    te, tn = np.ones(n), np.ones(n)
    hot = np.fromiter(pop.hot, dtype=np.int64, count=len(pop.hot))
    cold = np.fromiter(pop.cold, dtype=np.int64, count=len(pop.cold))
    te[hot] = cfg.theta_e_hot
    tn[hot] = cfg.theta_n_hot
    tn[cold] = cfg.theta_n_cold
    return te, tn


def write_edgelist(graph: SparseGraph, path):
    """Write ``# nodes=<n> symmetric=<0|1>`` then ``src,dst,weight`` rows.

    Symmetric graphs list each undirected edge once with ``src < dst``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = graph.rows()
    keep = rows < graph.indices if graph.symmetric else np.ones(graph.nnz, dtype=bool)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes={graph.num_nodes} symmetric={int(graph.symmetric)}\n")
        fh.write("src,dst,weight\n")
        for a, b, w in zip(rows[keep].tolist(), graph.indices[keep].tolist(), graph.data[keep].tolist()):
            fh.write(f"{a},{b},{w!r}\n")


def read_edgelist(path) -> SparseGraph:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("#"):
            raise DataError("missing '# nodes=... symmetric=...' header", 1)
        meta = dict(tok.split("=", 1) for tok in first[1:].split())
        try:
            n, symmetric = int(meta["nodes"]), meta["symmetric"] == "1"
        except (KeyError, ValueError):
            raise DataError("malformed graph header", 1) from None
        src, dst, w = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#") or line == "src,dst,weight":
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataError("expected src,dst,weight", lineno)
            src.append(int(parts[0]))
            dst.append(int(parts[1]))
            w.append(float(parts[2]))
    return SparseGraph.from_edges(n, src, dst, w, symmetric)
