"""Learnable state, the bundle of prebuilt graphs, the full forward pass and
the binary checkpoint format."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import CATEGORIES, GameCatalog, InteractionLog
from .graphs import (
    STRICT_PAIRS,
    BipartiteGraph,
    PopularitySets,
    SparseGraph,
    ThetaConfig,
    build_bipartite,
    build_connectivity_graph,
    build_raw_graph,
    build_strict_graph,
    popularity_sets,
)
from .propagation import (
    FusionWeights,
    PenrOperator,
    _mix,
    attention_weights,
    layer_weights,
    normalize_game_graph,
    propagate,
)

LEARNABLE = ("base_user_embeddings", "base_game_embeddings", "graphwise_query", "layerwise_query")

CHECKPOINT_MAGIC = b"CPGR"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the run seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


@dataclass
class ModelParams:
    base_user_embeddings: np.ndarray
    base_game_embeddings: np.ndarray
    graphwise_query: np.ndarray
    layerwise_query: np.ndarray
    fusion: FusionWeights = field(default_factory=FusionWeights)
    theta: ThetaConfig = field(default_factory=ThetaConfig)

    @property
    def num_users(self):
        return self.base_user_embeddings.shape[0]

    @property
    def num_games(self):
        return self.base_game_embeddings.shape[0]

    @property
    def dim(self):
        return self.base_game_embeddings.shape[1]

    def arrays(self):
        return {name: getattr(self, name) for name in LEARNABLE}

    def copy(self):
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype):
        return replace(self, **{k: v.astype(dtype) for k, v in self.arrays().items()})

    def squared_norm(self):
        return float(sum(np.sum(np.asarray(v, dtype=np.float64) ** 2) for v in self.arrays().values()))

    def equals(self, other):
        return (self.fusion == other.fusion and self.theta == other.theta
                and all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values())))


def init_params(num_users, num_games, dim, rng, fusion=None, theta=None, dtype=np.float32) -> ModelParams:
    """Glorot-uniform tables; queries start at all ones."""

    def table(rows):
        bound = np.sqrt(6.0 / (rows + dim))
        return rng.uniform(-bound, bound, size=(rows, dim)).astype(dtype)

    return ModelParams(
        table(num_users),
        table(num_games),
        np.ones(dim, dtype=dtype),
        np.ones(dim, dtype=dtype),
        fusion or FusionWeights(),
        theta or ThetaConfig(),
    )


@dataclass
class ModelGraphs:
    """Everything the forward pass needs that does not change during training."""

    catalog: GameCatalog
    train: InteractionLog
    strict: tuple[SparseGraph, SparseGraph, SparseGraph]
    connectivity: SparseGraph
    bipartite: BipartiteGraph
    popularity: PopularitySets
    theta: ThetaConfig
    penr: PenrOperator
    raw: dict = field(default_factory=dict)

    @property
    def num_users(self):
        return self.bipartite.num_users

    @property
    def num_games(self):
        return self.bipartite.num_games


def build_model_graphs(train: InteractionLog, catalog: GameCatalog, theta: ThetaConfig,
                       quantile: float = 0.2) -> ModelGraphs:
    raw = {c: build_raw_graph(catalog, c) for c in CATEGORIES}
    strict = tuple(normalize_game_graph(build_strict_graph(catalog, a, b, raw)) for a, b in STRICT_PAIRS)
    co = normalize_game_graph(build_connectivity_graph(catalog, raw))
    bg = build_bipartite(train)
    pop = popularity_sets(train, quantile)
    return ModelGraphs(catalog, train, strict, co, bg, pop, theta, PenrOperator.build(bg, pop, theta), raw)


@dataclass
class Forward:
    """Intermediate tensors of one forward pass, kept for backpropagation."""

    sgc_finals: list
    sgc_alpha: np.ndarray
    e_ca: np.ndarray
    cna_scaled: list
    cna_alpha: np.ndarray
    e_co: np.ndarray
    e_po_users: np.ndarray
    e_po_games: np.ndarray
    users: np.ndarray
    games: np.ndarray


def forward_all(params: ModelParams, graphs: ModelGraphs, k_ca=2, k_co=3, k_po=3, beta=0.1) -> Forward:
    if params.theta != graphs.theta:
        raise ValueError("parameters and graphs were built with different theta settings")
    base_g = np.asarray(params.base_game_embeddings, dtype=np.float64)
    base_u = np.asarray(params.base_user_embeddings, dtype=np.float64)

    sgc_finals = [propagate(g, base_g, k_ca)[-1] for g in graphs.strict]
    sgc_alpha = attention_weights(params.graphwise_query, sgc_finals)
    e_ca = _mix(sgc_alpha, sgc_finals)

    weights = layer_weights(k_co, beta)
    cna_scaled = [w * e for w, e in zip(weights, propagate(graphs.connectivity, base_g, k_co))]
    cna_alpha = attention_weights(params.layerwise_query, cna_scaled)
    e_co = _mix(cna_alpha, cna_scaled)

    eu, ei = base_u, base_g
    for _ in range(k_po):
        eu, ei = graphs.penr.forward(eu, ei)

    w = params.fusion
    games = w.w_ca * e_ca + w.w_co * e_co + w.w_po * ei
    return Forward(sgc_finals, sgc_alpha, e_ca, cna_scaled, cna_alpha, e_co, eu, ei, eu, games)


def final_embeddings(params, graphs, hp):
    fw = forward_all(params, graphs, hp.k_ca, hp.k_co, hp.k_po, hp.beta)
    return fw.users, fw.games


_HEADER = struct.Struct("<4sIIII6d")


def save_checkpoint(params: ModelParams, path):
    """Write the binary checkpoint; parameter arrays are stored as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.num_users, params.num_games, params.dim,
                          *params.fusion.as_tuple(), params.theta.theta_e_hot, params.theta.theta_n_hot,
                          params.theta.theta_n_cold)
    with open(path, "wb") as fh:
        fh.write(header)
        for name in LEARNABLE:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, nu, ni, dim, *floats = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    shapes = [(nu, dim), (ni, dim), (dim,), (dim,)]
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(blob)}")
    arrays = []
    offset = _HEADER.size
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape))
        offset += 4 * count
    return ModelParams(*arrays, fusion=FusionWeights(*floats[:3]), theta=ThetaConfig(*floats[3:]))
