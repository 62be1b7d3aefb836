"""Linear propagation on game graphs and the reweighted bipartite graph,
attention fusion, and the final weighted combination of branch outputs.

Every propagation operator here is linear in its input embeddings, so each
one also provides its transpose for the backward pass in
:mod:`cpgrec.training`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConfigError
from .graphs import BipartiteGraph, PopularitySets, SparseGraph, ThetaConfig, theta_arrays
from .kernels import csr_spmm


@dataclass(frozen=True)
class FusionWeights:
    w_ca: float = 0.4
    w_co: float = 0.3
    w_po: float = 0.3

    def __post_init__(self):
        ws = (self.w_ca, self.w_co, self.w_po)
        if any(not 0.0 <= w <= 1.0 for w in ws):
            raise ConfigError("fusion weights must lie in [0, 1]")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ConfigError(f"fusion weights must sum to 1, got {sum(ws)!r}")

    def as_tuple(self):
        return (self.w_ca, self.w_co, self.w_po)


def _check_rows(E, n, what="embedding table"):
    E = np.asarray(E)
    if E.ndim != 2 or E.shape[0] != n:
        raise ValueError(f"{what} has shape {E.shape}, expected ({n}, dim)")
    return E


def normalize_game_graph(g: SparseGraph) -> SparseGraph:
    """Symmetric degree normalisation ``w / sqrt(deg_a * deg_b)`` (unweighted degrees)."""
    deg = g.degrees().astype(np.float64)
    rows = g.rows()
    return g.with_data(g.data / (np.sqrt(deg[rows]) * np.sqrt(deg[g.indices])))


def lightgcn_layer(normed: SparseGraph, E) -> np.ndarray:
    """One neighbour-aggregation step; isolated nodes keep their input row."""
    E = _check_rows(E, normed.num_nodes)
    out = csr_spmm(normed.indptr, normed.indices, normed.data, E)
    isolated = normed.degrees() == 0
    out[isolated] = E[isolated]
    return out


def lightgcn_layer_transpose(normed: SparseGraph, G) -> np.ndarray:
    # normalised adjacency plus the isolated-node identity is symmetric
    return lightgcn_layer(normed, G)


def propagate(normed: SparseGraph, E, k: int) -> list[np.ndarray]:
    """Outputs of layers ``1..k``."""
    outs = []
    for _ in range(k):
        E = lightgcn_layer(normed, E)
        outs.append(E)
    return outs


class PenrOperator:
    """Popularity-reweighted bipartite convolution as a fixed linear operator.

    Users with no training games keep their embedding (zero degree does not
    occur after 5-core filtering). Games with no players pass through scaled
    by their node weight.
    """

    def __init__(self, bg: BipartiteGraph, theta_e_arr, theta_n_arr):
        self.bg = bg
        du = bg.user_degrees().astype(np.float64)
        di = bg.game_degrees().astype(np.float64)
        self.theta_n = np.asarray(theta_n_arr, dtype=np.float64)
        edge_scale = np.asarray(theta_e_arr, dtype=np.float64) * self.theta_n
        u_rows = np.repeat(np.arange(bg.num_users), bg.user_degrees())
        g_rows = np.repeat(np.arange(bg.num_games), bg.game_degrees())
        # user <- game: theta_e(i) theta_n(i) / sqrt(|N_u| |N_i|)
        self.ug_plain = 1.0 / (np.sqrt(du[u_rows]) * np.sqrt(di[bg.user_games]))
        self.ug_data = edge_scale[bg.user_games] * self.ug_plain
        # game <- user: 1 / sqrt(|N_i| |N_u|)
        self.gu_data = 1.0 / (np.sqrt(di[g_rows]) * np.sqrt(du[bg.game_users]))
        # transpose of (user <- game) maps users onto games, ordered by game
        order = np.lexsort((u_rows, bg.user_games))
        if not np.array_equal(u_rows[order], bg.game_users):
            raise ValueError("bipartite graph edge lists are inconsistent")
        self.ug_T_data = self.ug_data[order]
        # transpose of (game <- user) lives on the user-side edge list
        self.gu_T_data = self.ug_plain
        self.user_self = np.where(du > 0, 1.0 / np.where(du > 0, du, 1.0), 1.0)
        self.game_self = self.theta_n * np.where(di > 0, 1.0 / np.where(di > 0, di, 1.0), 1.0)

    @classmethod
    def build(cls, bg: BipartiteGraph, pop: PopularitySets, cfg: ThetaConfig):
        te, tn = theta_arrays(pop, cfg)
        return cls(bg, te, tn)

    def forward(self, Eu, Ei):
        bg = self.bg
        Eu = _check_rows(Eu, bg.num_users, "user table")
        Ei = _check_rows(Ei, bg.num_games, "game table")
        if Eu.shape[1] != Ei.shape[1]:
            raise ValueError("user and game tables differ in dimension")
        out_u = self.user_self[:, None] * Eu + csr_spmm(bg.user_indptr, bg.user_games, self.ug_data, Ei)
        out_i = self.game_self[:, None] * Ei + csr_spmm(bg.game_indptr, bg.game_users, self.gu_data, Eu)
        return out_u, out_i

    def transpose(self, Gu, Gi):
        """Apply the transposed operator to upstream gradients."""
        bg = self.bg
        gu = self.user_self[:, None] * Gu + csr_spmm(bg.user_indptr, bg.user_games, self.gu_T_data, Gi)
        gi = self.game_self[:, None] * Gi + csr_spmm(bg.game_indptr, bg.game_users, self.ug_T_data, Gu)
        return gu, gi


def reweighted_bipartite_layer(bg: BipartiteGraph, Eu, Ei, pop: PopularitySets, cfg: ThetaConfig):
    return PenrOperator.build(bg, pop, cfg).forward(Eu, Ei)


def layer_weights(k: int, beta: float) -> list[float]:
    """``w_l = 1 - (k - l) * beta`` for ``l = 1..k``; deeper layers weigh more."""
    if k < 1:
        raise ConfigError("layer count must be >= 1")
    if beta < 0 or (k > 1 and beta >= 1.0 / (k - 1)):
        raise ConfigError(f"beta={beta} makes some layer weight non-positive for k={k}")
    return [1.0 - (k - l) * beta for l in range(1, k + 1)]


def attention_weights(q, candidates) -> np.ndarray:
    """Row-wise softmax of ``q . candidate_s(i)``; shape ``(rows, S)``."""
    if not candidates:
        raise ValueError("attention needs at least one candidate")
    shape = candidates[0].shape
    if any(c.shape != shape for c in candidates):
        raise ValueError("attention candidates differ in shape")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (shape[1],):
        raise ValueError(f"query has shape {q.shape}, expected ({shape[1]},)")
    logits = np.stack([c @ q for c in candidates], axis=1)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def attention_fuse(q, candidates) -> np.ndarray:
    alpha = attention_weights(q, candidates)
    return _mix(alpha, candidates)


def _mix(alpha, candidates):
    out = alpha[:, 0:1] * candidates[0]
    for s in range(1, len(candidates)):
        out = out + alpha[:, s:s + 1] * candidates[s]
    return out


def attention_backward(q, candidates, alpha, out, grad_out):
    """Gradients of a scalar loss w.r.t. each candidate and the query."""
    q = np.asarray(q, dtype=np.float64)
    g_dot_out = np.einsum("nd,nd->n", grad_out, out)
    g_cands = []
    g_q = np.zeros_like(q)
    for s, c in enumerate(candidates):
        # d loss / d logit_s
        dlogit = alpha[:, s] * (np.einsum("nd,nd->n", grad_out, c) - g_dot_out)
        g_cands.append(alpha[:, s:s + 1] * grad_out + dlogit[:, None] * q[None, :])
        g_q += dlogit @ c
    return g_cands, g_q


def forward_sgc(params, strict_graphs, k: int = 2) -> np.ndarray:
    """Graph-wise attention over the k-layer outputs of the three strict graphs."""
    base = np.asarray(params.base_game_embeddings, dtype=np.float64)
    finals = [propagate(g, base, k)[-1] for g in strict_graphs]
    return attention_fuse(params.graphwise_query, finals)


def forward_cna(params, co_graph: SparseGraph, k: int = 3, beta: float = 0.1) -> np.ndarray:
    """Layer-wise attention over decay-weighted connectivity-graph layer outputs."""
    weights = layer_weights(k, beta)
    base = np.asarray(params.base_game_embeddings, dtype=np.float64)
    layers = propagate(co_graph, base, k)
    return attention_fuse(params.layerwise_query, [w * e for w, e in zip(weights, layers)])


def forward_penr(params, bg: BipartiteGraph, pop: PopularitySets, cfg: ThetaConfig, k: int = 3,
                 operator: PenrOperator | None = None):
    """Final-layer user and game outputs after ``k`` reweighted bipartite layers."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    op = operator or PenrOperator.build(bg, pop, cfg)
    Eu = np.asarray(params.base_user_embeddings, dtype=np.float64)
    Ei = np.asarray(params.base_game_embeddings, dtype=np.float64)
    for _ in range(k):
        Eu, Ei = op.forward(Eu, Ei)
    return Eu, Ei


def fuse_final(e_ca, e_co, e_po_games, e_po_users, w: FusionWeights):
    """Users come from the bipartite branch alone; games are a weighted sum of branches."""
    if not isinstance(w, FusionWeights):
        w = FusionWeights(*w)
    games = w.w_ca * e_ca + w.w_co * e_co + w.w_po * e_po_games
    return e_po_users, games
