"""Top-K recommendation, accuracy and diversity metrics, case-study counters."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CATEGORIES, GameCatalog, InteractionLog, SplitLog
from .model import final_embeddings

METRIC_NAMES = (
    "ndcg", "recall", "hit", "precision",
    "coverage_genre", "coverage_developer", "coverage_publisher", "coverage_total",
    "entropy_genre", "entropy_developer", "entropy_publisher",
)

_CHUNK = 4096


def topk_from_scores(scores, exclude, K):
    """Top ``K`` columns of a 1-d score vector, skipping ``exclude``.

    Ties go to the lower index. Returns fewer than ``K`` items when not
    enough are eligible.
    """
    scores = np.array(scores, dtype=np.float64)
    eligible = np.ones(len(scores), dtype=bool)
    eligible[np.asarray(exclude, dtype=np.int64)] = False
    scores[~eligible] = -np.inf
    order = np.argsort(-scores, kind="stable")
    return order[:min(K, int(eligible.sum()))]


def _user_scores(eu, ei, users):
    for start in range(0, len(users), _CHUNK):
        chunk = users[start:start + _CHUNK]
        yield chunk, eu[chunk] @ ei.T


def recommend_lists(eu, ei, train_items, users, K):
    """``{user: top-K game array}`` from final embeddings, masking training games."""
    users = np.asarray(users, dtype=np.int64)
    out = {}
    for chunk, scores in _user_scores(eu, ei, users):
        for row, u in zip(scores, chunk.tolist()):
            out[u] = topk_from_scores(row, train_items[u], K)
    return out


def recommend_topk(params, graphs, u, K, hp):
    """Top-K games for one user and whether the list came out short."""
    eu, ei = final_embeddings(params, graphs, hp)
    items = graphs.train.items_by_user()[u]
    recs = topk_from_scores(eu[u] @ ei.T, items, K)
    return recs, len(recs) < K


def ranking_metrics(recs, test_items, K):
    """``(ndcg, recall, hit, precision)`` with binary relevance."""
    test = set(np.asarray(test_items).tolist())
    if not test:
        raise ValueError("user has no test interactions")
    top = np.asarray(recs)[:K].tolist()
    gains = [1.0 / math.log2(r + 2) for r, g in enumerate(top) if g in test]
    hits = len(gains)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(K, len(test))))
    return sum(gains) / idcg, hits / len(test), float(hits > 0), hits / K


def coverage_at_k(recs, catalog: GameCatalog, K):
    """Distinct genre, developer and publisher labels in the top ``K``, plus their sum."""
    top = np.asarray(recs)[:K].tolist()
    counts = [len(set().union(*(catalog.labels(c)[i] for i in top))) for c in CATEGORIES]
    return counts[0], counts[1], counts[2], sum(counts)


def entropy_at_k(recs, catalog: GameCatalog, K, category, base=math.e):
    labels = catalog.labels(category)
    counts: dict[str, int] = {}
    for i in np.asarray(recs)[:K].tolist():
        for label in labels[i]:
            counts[label] = counts.get(label, 0) + 1
    total = sum(counts.values())
    if total == 0:
        return 0.0
    h = -sum((c / total) * math.log(c / total) for c in counts.values())
    return h / math.log(base)


def user_metrics(recs, test_items, catalog, K, base=math.e):
    ndcg, recall, hit, precision = ranking_metrics(recs, test_items, K)
    cov = coverage_at_k(recs, catalog, K)
    ent = [entropy_at_k(recs, catalog, K, c, base) for c in CATEGORIES]
    return dict(zip(METRIC_NAMES, (ndcg, recall, hit, precision, *cov, *ent)))


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)
    num_users: int = 0

    def __getitem__(self, K):
        return self.values[K]

    def rows(self):
        return [{"K": K, **{m: self.values[K][m] for m in METRIC_NAMES}} for K in sorted(self.values)]

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["K", *METRIC_NAMES])
            for row in self.rows():
                w.writerow([row["K"], *(repr(float(row[m])) for m in METRIC_NAMES)])


def report_from_lists(recs: dict, test_by_user, catalog, Ks=(5, 10), base=math.e) -> MetricsReport:
    """Average per-user metrics over users that have test items, in ascending user order."""
    users = [u for u in sorted(recs) if len(test_by_user[u])]
    if not users:
        raise ValueError("no evaluable users")
    values = {}
    for K in Ks:
        sums = dict.fromkeys(METRIC_NAMES, 0.0)
        for u in users:
            for name, v in user_metrics(recs[u], test_by_user[u], catalog, K, base).items():
                sums[name] += v
        values[K] = {name: s / len(users) for name, s in sums.items()}
    return MetricsReport(values, len(users))


def evaluate(params, graphs, split: SplitLog, catalog: GameCatalog, hp, Ks=(5, 10), on="test",
             base=math.e) -> MetricsReport:
    target: InteractionLog = getattr(split, on)
    target_items = target.items_by_user()
    users = np.flatnonzero(target.user_counts() > 0)
    if len(users) == 0:
        raise ValueError(f"no users with {on} interactions")
    eu, ei = final_embeddings(params, graphs, hp)
    recs = recommend_lists(eu, ei, graphs.train.items_by_user(), users, max(Ks))
    return report_from_lists(recs, target_items, catalog, Ks, base)


def longtail_exposure(params, graphs, pop, K, hp, users=None) -> float:
    """Mean number of long-tail games per top-K list."""
    if not pop.cold:
        return 0.0
    users = np.arange(graphs.num_users) if users is None else np.asarray(users)
    eu, ei = final_embeddings(params, graphs, hp)
    recs = recommend_lists(eu, ei, graphs.train.items_by_user(), users, K)
    return float(np.mean([len(pop.cold.intersection(r.tolist())) for r in recs.values()]))


def deceptive_frequency(params, graphs, deceptive, split: SplitLog, K, hp, users=None) -> float:
    """Mean count of deceptive games a user is shown that are not in their test set."""
    deceptive = frozenset(int(i) for i in deceptive)
    if not deceptive:
        return 0.0
    users = np.arange(graphs.num_users) if users is None else np.asarray(users)
    test_items = split.test.items_by_user()
    eu, ei = final_embeddings(params, graphs, hp)
    recs = recommend_lists(eu, ei, graphs.train.items_by_user(), users, K)
    counts = [len(deceptive.intersection(r.tolist()).difference(test_items[u].tolist())) for u, r in recs.items()]
    return float(np.mean(counts))


def build_deceptive_set(params, graphs, split: SplitLog, hp, rng, size=10, fraction=0.25, K=5):
    """Games most often recommended to a sampled user subset without being test positives.

    Intended for a model trained without score reweighting. Ties go to the
    lower game index.
    """
    n = graphs.num_users
    sample = np.sort(rng.choice(n, size=max(1, int(round(fraction * n))), replace=False))
    test_items = split.test.items_by_user()
    eu, ei = final_embeddings(params, graphs, hp)
    recs = recommend_lists(eu, ei, graphs.train.items_by_user(), sample, K)
    freq = np.zeros(graphs.num_games, dtype=np.int64)
    for u, r in recs.items():
        negatives = np.setdiff1d(r, test_items[u])
        freq[negatives] += 1
    order = np.lexsort((np.arange(len(freq)), -freq))
    return frozenset(int(i) for i in order[:size] if freq[i] > 0)
