"""BPR training with negative-score reweighting and hand-derived gradients."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import ConfigError, DataError, GameCatalog, InteractionLog, SplitLog
from .evaluation import recommend_lists, report_from_lists
from .graphs import ThetaConfig
from .kernels import bpr_nsr_batch
from .model import (
    LEARNABLE,
    ModelGraphs,
    ModelParams,
    build_model_graphs,
    final_embeddings,
    forward_all,
    init_params,
    load_checkpoint,
    named_rng,
    save_checkpoint,
)
from .propagation import FusionWeights, attention_backward, layer_weights, lightgcn_layer_transpose

__all__ = [
    "Hyperparams", "TrainBatch", "Gradients", "AdamState", "TrainState", "PRESETS",
    "score", "nsr", "nsr_slope", "sample_negatives", "bpr_nsr_loss", "compute_gradients",
    "adam_step", "train", "resolve_preset", "ModelParams", "save_checkpoint", "load_checkpoint",
]

logger = logging.getLogger(__name__)

PRESETS = ("balanced", "accuracy_focused", "diversity_focused", "custom")


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.03
    batch_size: int = 1024
    dim: int = 32
    beta: float = 0.1
    m: float = 6.5
    l2: float = 1e-4
    k_ca: int = 2
    k_co: int = 3
    k_po: int = 3
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    nsr: bool = True
    popularity_quantile: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.m > 0:
            raise ConfigError("m must be > 0")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.batch_size < 1 or self.dim < 1:
            raise ConfigError("batch_size and dim must be >= 1")
        if min(self.k_ca, self.k_co, self.k_po) < 1:
            raise ConfigError("layer counts must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")
        layer_weights(self.k_co, self.beta)


def resolve_preset(preset, fusion=None, theta=None):
    """Fusion weights and theta for a named preset; ``custom`` uses what is given."""
    if preset == "balanced":
        return FusionWeights(0.4, 0.3, 0.3), ThetaConfig()
    if preset == "accuracy_focused":
        return FusionWeights(1.0, 0.0, 0.0), ThetaConfig.unit()
    if preset == "diversity_focused":
        return FusionWeights(0.0, 0.5, 0.5), ThetaConfig()
    if preset == "custom":
        return fusion or FusionWeights(), theta or ThetaConfig()
    raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")


def score(e_u, e_i) -> float:
    return float(np.dot(e_u, e_i))


def _sigmoid(r):
    r = np.asarray(r, dtype=np.float64)
    z = np.exp(-np.abs(r))
    return np.where(r >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def nsr(r, m):
    """Reweighted negative score ``m * sigmoid(r) * r``."""
    out = m * _sigmoid(r) * np.asarray(r, dtype=np.float64)
    return float(out) if np.ndim(out) == 0 else out


def nsr_slope(r, m):
    s = _sigmoid(r)
    out = m * s * (1.0 + np.asarray(r, dtype=np.float64) * (1.0 - s))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TrainBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def triples(self):
        return list(zip(self.users.tolist(), self.pos.tolist(), self.neg.tolist()))

    def __getitem__(self, sl):
        return TrainBatch(self.users[sl], self.pos[sl], self.neg[sl])


def sample_negatives(train: InteractionLog, positives, rng: np.random.Generator) -> TrainBatch:
    """One uniform non-interacted game per positive pair, by rejection."""
    users, pos = (np.asarray(a, dtype=np.int64) for a in positives)
    ni = train.num_games
    counts = train.user_counts()
    if len(users) and np.any(counts[users] >= ni):
        full = int(users[np.argmax(counts[users] >= ni)])
        raise DataError(f"user {train.user_ids[full]!r} has interacted with every game")
    known = train.users * ni + train.games  # sorted
    neg = rng.integers(ni, size=len(users))
    todo = np.arange(len(users))
    while len(todo):
        keys = users[todo] * ni + neg[todo]
        loc = np.searchsorted(known, keys)
        hit = (loc < len(known)) & (known[np.minimum(loc, len(known) - 1)] == keys)
        todo = todo[hit]
        neg[todo] = rng.integers(ni, size=len(todo))
    return TrainBatch(users, pos, neg)


@dataclass
class Gradients:
    base_user_embeddings: np.ndarray
    base_game_embeddings: np.ndarray
    graphwise_query: np.ndarray
    layerwise_query: np.ndarray

    def arrays(self):
        return {name: getattr(self, name) for name in LEARNABLE}


def _fw(params, graphs, hp):
    return forward_all(params, graphs, hp.k_ca, hp.k_co, hp.k_po, hp.beta)


def bpr_nsr_loss(batch: TrainBatch, params: ModelParams, graphs: ModelGraphs, hp: Hyperparams) -> float:
    fw = _fw(params, graphs, hp)
    data, _, _ = bpr_nsr_batch(fw.users, fw.games, batch.users, batch.pos, batch.neg, hp.m, hp.nsr)
    return data + hp.l2 * params.squared_norm()


def compute_gradients(batch: TrainBatch, params: ModelParams, graphs: ModelGraphs, hp: Hyperparams):
    """Loss and exact gradients for every learnable array."""
    fw = _fw(params, graphs, hp)
    data, g_users, g_games = bpr_nsr_batch(fw.users, fw.games, batch.users, batch.pos, batch.neg, hp.m, hp.nsr)
    w = params.fusion

    # bipartite branch: users feed the score directly, games through w_po
    gu, gi = g_users, w.w_po * g_games
    for _ in range(hp.k_po):
        gu, gi = graphs.penr.transpose(gu, gi)
    grad_u, grad_g = gu, gi

    g_cands, g_qg = attention_backward(params.graphwise_query, fw.sgc_finals, fw.sgc_alpha, fw.e_ca,
                                       w.w_ca * g_games)
    for graph, g in zip(graphs.strict, g_cands):
        for _ in range(hp.k_ca):
            g = lightgcn_layer_transpose(graph, g)
        grad_g = grad_g + g

    g_scaled, g_ql = attention_backward(params.layerwise_query, fw.cna_scaled, fw.cna_alpha, fw.e_co,
                                        w.w_co * g_games)
    lw = layer_weights(hp.k_co, hp.beta)
    # sum_l M^l g_l evaluated as M(g_1 + M(g_2 + ... M g_k))
    acc = lw[-1] * g_scaled[-1]
    for l in range(hp.k_co - 2, -1, -1):
        acc = lightgcn_layer_transpose(graphs.connectivity, acc) + lw[l] * g_scaled[l]
    grad_g = grad_g + lightgcn_layer_transpose(graphs.connectivity, acc)

    grads = Gradients(grad_u, grad_g, g_qg, g_ql)
    for name in LEARNABLE:
        p = np.asarray(getattr(params, name), dtype=np.float64)
        setattr(grads, name, getattr(grads, name) + 2.0 * hp.l2 * p)
    return data + hp.l2 * params.squared_norm(), grads


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros(v.shape) for k, v in params.arrays().items()},
                   {k: np.zeros(v.shape) for k, v in params.arrays().items()}, 0)


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, hp, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Moments are float64; params keep their dtype."""
    if not state.m:
        state = AdamState.zeros(params)
    t = state.t + 1
    new_m, new_v, updates = {}, {}, {}
    for name in LEARNABLE:
        p = getattr(params, name)
        g = np.asarray(getattr(grads, name), dtype=np.float64)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        updates[name] = (p.astype(np.float64) - hp.learning_rate * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return replace(params, **updates), AdamState(new_m, new_v, t)


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int
    params: ModelParams
    best: ModelParams
    best_score: float
    bad_epochs: int
    adam: AdamState
    rng_state: dict
    history: list

    def save(self, path):
        arrays = {}
        for prefix, p in (("params", self.params), ("best", self.best)):
            for k, v in p.arrays().items():
                arrays[f"{prefix}.{k}"] = v
        for k in LEARNABLE:
            if self.adam.m:
                arrays[f"adam_m.{k}"] = self.adam.m[k]
                arrays[f"adam_v.{k}"] = self.adam.v[k]
        meta = {
            "epoch": self.epoch, "best_score": self.best_score, "bad_epochs": self.bad_epochs,
            "adam_t": self.adam.t, "rng_state": self.rng_state, "history": self.history,
            "fusion": list(self.params.fusion.as_tuple()), "theta": asdict(self.params.theta),
        }
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            fusion, theta = FusionWeights(*meta["fusion"]), ThetaConfig(**meta["theta"])

            def params(prefix):
                return ModelParams(*(z[f"{prefix}.{k}"] for k in LEARNABLE), fusion=fusion, theta=theta)

            adam = AdamState()
            if f"adam_m.{LEARNABLE[0]}" in z:
                adam = AdamState({k: z[f"adam_m.{k}"] for k in LEARNABLE},
                                 {k: z[f"adam_v.{k}"] for k in LEARNABLE}, meta["adam_t"])
            return cls(meta["epoch"], params("params"), params("best"), meta["best_score"], meta["bad_epochs"],
                       adam, meta["rng_state"], meta["history"])


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_recall10: float
    val_coverage5: float

    def as_row(self):
        return [self.epoch, self.loss, self.val_recall10, self.val_coverage5]


def _validation(params, graphs, split, catalog, hp):
    val_items = split.val.items_by_user()
    users = np.flatnonzero(split.val.user_counts() > 0)
    if len(users) == 0:
        return math.nan, math.nan
    eu, ei = final_embeddings(params, graphs, hp)
    recs = recommend_lists(eu, ei, graphs.train.items_by_user(), users, 10)
    report = report_from_lists(recs, val_items, catalog, Ks=(5, 10))
    return report[10]["recall"], report[5]["coverage_total"]


def train(split: SplitLog, catalog: GameCatalog, hp: Hyperparams, preset="balanced", fusion=None, theta=None,
          graphs: ModelGraphs | None = None, resume: TrainState | None = None, on_epoch=None):
    """Train and return ``(best_params, history)``.

    ``on_epoch(record, state)`` is called after every epoch with the
    :class:`EpochRecord` and a :class:`TrainState` for resuming.
    """
    fusion, theta = resolve_preset(preset, fusion, theta)
    if resume is not None:
        fusion, theta = resume.params.fusion, resume.params.theta
    graphs = graphs or build_model_graphs(split.train, catalog, theta, hp.popularity_quantile)
    sampler = named_rng(hp.seed, "sampling")

    if resume is None:
        params = init_params(graphs.num_users, graphs.num_games, hp.dim, named_rng(hp.seed, "init"), fusion, theta)
        state = TrainState(0, params, params.copy(), -math.inf, 0, AdamState.zeros(params),
                           sampler.bit_generator.state, [])
    else:
        state = resume
        sampler.bit_generator.state = state.rng_state

    params, adam = state.params, state.adam
    history = [EpochRecord(*row) for row in state.history]
    pos_users, pos_games = split.train.users, split.train.games
    n = len(pos_users)

    for epoch in range(state.epoch + 1, hp.max_epochs + 1):
        if state.bad_epochs >= hp.patience:
            break
        perm = sampler.permutation(n)
        batch = sample_negatives(split.train, (pos_users[perm], pos_games[perm]), sampler)
        losses = []
        for start in range(0, n, hp.batch_size):
            loss, grads = compute_gradients(batch[start:start + hp.batch_size], params, graphs, hp)
            params, adam = adam_step(params, grads, adam, hp)
            losses.append(loss)
        recall, coverage = _validation(params, graphs, split, catalog, hp)
        record = EpochRecord(epoch, float(np.mean(losses)), recall, coverage)
        history.append(record)
        logger.info("epoch %d loss %.6f val_recall@10 %.4f val_coverage@5 %.4f", *record.as_row())

        best, best_score, bad = state.best, state.best_score, state.bad_epochs
        if math.isnan(recall) or recall > best_score:
            best, best_score, bad = params.copy(), (recall if not math.isnan(recall) else best_score), 0
        else:
            bad += 1
        state = TrainState(epoch, params, best, best_score, bad, adam, sampler.bit_generator.state,
                           [r.as_row() for r in history])
        if on_epoch is not None:
            on_epoch(record, state)

    return state.best, history


def hyperparams_from(mapping) -> Hyperparams:
    names = {f.name for f in fields(Hyperparams)}
    return Hyperparams(**{k: v for k, v in mapping.items() if k in names})
