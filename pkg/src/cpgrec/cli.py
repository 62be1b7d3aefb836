"""Command-line entry point (``cpgrec``)."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import _accel
from .config import RunConfig, coerce, load_run_config
from .data import (
    CATEGORIES,
    ConfigError,
    DataError,
    apply_user_5core,
    generate_synthetic,
    load_catalog,
    load_interactions,
    load_split,
    split_interactions,
    write_catalog,
    write_interactions,
    write_split,
)
from .evaluation import build_deceptive_set, deceptive_frequency, evaluate, longtail_exposure, recommend_lists
from .graphs import STRICT_PAIRS, build_game_graphs, popularity_sets, write_edgelist
from .model import CheckpointError, build_model_graphs, final_embeddings, load_checkpoint, named_rng, save_checkpoint
from .training import TrainState, train

logger = logging.getLogger("cpgrec")

HISTORY_HEADER = ["epoch", "loss", "val_recall@10", "val_coverage@5"]
CASE_COLUMNS = ["longtail@5", "longtail@10", "deceptive@5", "deceptive@10"]


class CommandError(RuntimeError):
    pass


def _require(path, what):
    if not path:
        raise ConfigError(f"--{what} is required")
    if not Path(path).exists():
        raise CommandError(f"{what} not found: {path}")
    return path


def _split_files_exist(prefix):
    return all(Path(prefix + s).exists() for s in (".train.csv", ".val.csv", ".test.csv"))


def _load_data(cfg: RunConfig):
    catalog = load_catalog(_require(cfg.catalog, "catalog"))
    if not cfg.data or not _split_files_exist(cfg.data):
        raise CommandError(f"split files not found for prefix {cfg.data!r} (run `cpgrec ingest`)")
    return catalog, load_split(cfg.data, catalog)


def _checkpoint_path(cfg):
    return cfg.checkpoint or str(Path(cfg.out) / "model.cpgr")


def cmd_synth(cfg: RunConfig):
    catalog, log = generate_synthetic(cfg.synth())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_catalog(catalog, out / "catalog.csv")
    write_interactions(log, catalog, out / "interactions.csv")
    print(f"wrote {catalog.num_games} games and {len(log)} interactions from {log.num_users} users to {out}")


def cmd_ingest(cfg: RunConfig):
    catalog = load_catalog(_require(cfg.catalog, "catalog"))
    log = load_interactions(_require(cfg.interactions, "interactions"), catalog)
    filtered = apply_user_5core(log, cfg.core_k)
    split = split_interactions(filtered, seed=cfg.seed)
    prefix = cfg.data or str(Path(cfg.out) / "data")
    write_split(split, catalog, prefix)
    print(f"users {log.num_users} -> {filtered.num_users} after {cfg.core_k}-core; "
          f"train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)}; prefix {prefix}")


def cmd_graph_stats(cfg: RunConfig):
    catalog = load_catalog(_require(cfg.catalog, "catalog"))
    raw, strict, co = build_game_graphs(catalog)
    short = {"genre": "g", "developer": "d", "publisher": "p"}
    width = max(10, len(str(max([g.num_edges for g in raw.values()] + [0]))) + 2)
    print(" " * 10 + "".join(f"{c:>{width}}" for c in CATEGORIES))
    for a in CATEGORIES:
        cells = []
        for b in CATEGORIES:
            g = raw[a] if a == b else strict.get((a, b)) or strict.get((b, a))
            cells.append(f"{g.num_edges:>{width}}")
        print(f"{a:<10}" + "".join(cells))
    print(f"connectivity edges: {co.num_edges}")
    if cfg.data and _split_files_exist(cfg.data):
        pop = popularity_sets(load_split(cfg.data, catalog).train, cfg.popularity_quantile)
        print(f"popular games: {len(pop.hot)}  long-tail games: {len(pop.cold)}")
    if cfg.out:
        out = Path(cfg.out) / "graphs"
        for c, g in raw.items():
            write_edgelist(g, out / f"raw_{short[c]}.csv")
        for (a, b), g in strict.items():
            write_edgelist(g, out / f"strict_{short[a]}{short[b]}.csv")
        write_edgelist(co, out / "connectivity.csv")


def _append_history(path, records, fresh):
    mode = "w" if fresh else "a"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(HISTORY_HEADER)
        for r in records:
            w.writerow([r.epoch, repr(r.loss), repr(r.val_recall10), repr(r.val_coverage5)])


def cmd_train(cfg: RunConfig):
    catalog, split = _load_data(cfg)
    hp = cfg.hyperparams()
    fusion, theta = cfg.fusion_and_theta()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "train_state.npz"
    history_path = out / "history.csv"
    resume = None
    if cfg.resume:
        if not state_path.exists():
            raise CommandError(f"no training state to resume at {state_path}")
        resume = TrainState.load(state_path)
    _append_history(history_path, [], fresh=resume is None)
    cfg.dump(out / "run.cfg")

    def on_epoch(record, state):
        _append_history(history_path, [record], fresh=False)
        state.save(state_path)
        if cfg.save_every_epoch:
            save_checkpoint(state.params, out / "epochs" / f"epoch_{record.epoch:04d}.cpgr")
        print(f"epoch {record.epoch:4d}  loss {record.loss:.6f}  val_recall@10 {record.val_recall10:.4f}  "
              f"val_coverage@5 {record.val_coverage5:.4f}", flush=True)

    best, history = train(split, catalog, hp, cfg.preset, fusion, theta, resume=resume, on_epoch=on_epoch)
    save_checkpoint(best, _checkpoint_path(cfg))
    print(f"saved {_checkpoint_path(cfg)} after {len(history)} epochs")


def _model_for(cfg, path):
    if not Path(path).exists():
        raise CommandError(f"checkpoint not found: {path}")
    params = load_checkpoint(path)
    return params


def cmd_evaluate(cfg: RunConfig):
    catalog, split = _load_data(cfg)
    params = _model_for(cfg, _checkpoint_path(cfg))
    graphs = build_model_graphs(split.train, catalog, params.theta, cfg.popularity_quantile)
    report = evaluate(params, graphs, split, catalog, cfg.hyperparams(), Ks=(5, 10))
    path = Path(cfg.out) / "metrics.csv"
    report.to_csv(path)
    for row in report.rows():
        print(f"@{row['K']}: " + "  ".join(f"{k}={row[k]:.4f}" for k in ("ndcg", "recall", "hit", "precision",
                                                                      "coverage_total")))
    print(f"wrote {path} ({report.num_users} users)")


def cmd_recommend(cfg: RunConfig, user_ids):
    catalog, split = _load_data(cfg)
    params = _model_for(cfg, _checkpoint_path(cfg))
    graphs = build_model_graphs(split.train, catalog, params.theta, cfg.popularity_quantile)
    index = {uid: n for n, uid in enumerate(split.train.user_ids)}
    missing = [u for u in user_ids if u not in index]
    if missing:
        raise CommandError(f"unknown users: {', '.join(missing)}")
    eu, ei = final_embeddings(params, graphs, cfg.hyperparams())
    users = [index[u] for u in user_ids] if user_ids else list(range(graphs.num_users))
    recs = recommend_lists(eu, ei, graphs.train.items_by_user(), users, cfg.top_k)
    print("user_id,rank,game_id,score")
    for u in users:
        for rank, i in enumerate(recs[u].tolist(), start=1):
            print(f"{split.train.user_ids[u]},{rank},{catalog.game_ids[i]},{float(eu[u] @ ei[i]):.6f}")


def _epoch_checkpoints(run_dir):
    return sorted((Path(run_dir) / "epochs").glob("epoch_*.cpgr"))


def case_study_series(cfg, catalog, split, run_dirs, deceptive_sets):
    """Per-epoch ``[longtail@5, longtail@10, deceptive@5, deceptive@10]`` averaged over runs."""
    hp = cfg.hyperparams()
    per_run = []
    for run_dir, deceptive in zip(run_dirs, deceptive_sets):
        rows = []
        graphs = None
        for ckpt in _epoch_checkpoints(run_dir):
            params = load_checkpoint(ckpt)
            if graphs is None or graphs.theta != params.theta:
                graphs = build_model_graphs(split.train, catalog, params.theta, cfg.popularity_quantile)
            rows.append([longtail_exposure(params, graphs, graphs.popularity, 5, hp),
                         longtail_exposure(params, graphs, graphs.popularity, 10, hp),
                         deceptive_frequency(params, graphs, deceptive, split, 5, hp),
                         deceptive_frequency(params, graphs, deceptive, split, 10, hp)])
        per_run.append(np.array(rows, dtype=np.float64).reshape(-1, 4))
    if not per_run:
        return np.zeros((0, 4))
    n = min(len(r) for r in per_run)
    return np.mean([r[:n] for r in per_run], axis=0)


def cmd_case_study(cfg: RunConfig, nsr_runs, nonsr_runs):
    catalog, split = _load_data(cfg)
    if nsr_runs and nonsr_runs and len(nsr_runs) != len(nonsr_runs):
        raise ConfigError("--nsr-runs and --nonsr-runs must pair up one run per seed")
    hp = cfg.hyperparams()
    deceptive_sets = []
    # deceptive games come from each seed's final model trained without reweighting
    for n, run_dir in enumerate(nonsr_runs or nsr_runs or []):
        ckpts = _epoch_checkpoints(run_dir)
        if not ckpts:
            deceptive_sets.append(frozenset())
            continue
        params = load_checkpoint(ckpts[-1])
        graphs = build_model_graphs(split.train, catalog, params.theta, cfg.popularity_quantile)
        deceptive_sets.append(build_deceptive_set(params, graphs, split, hp, named_rng(cfg.seed + n, "deceptive")))
    on = case_study_series(cfg, catalog, split, nsr_runs or [], deceptive_sets)
    off = case_study_series(cfg, catalog, split, nonsr_runs or [], deceptive_sets)
    n_rows = max(len(on), len(off))
    path = Path(cfg.out) / "case_study.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", *CASE_COLUMNS, *(f"{c}_nonsr" for c in CASE_COLUMNS)])
        for e in range(n_rows):
            left = on[e].tolist() if e < len(on) else [""] * 4
            right = off[e].tolist() if e < len(off) else [""] * 4
            w.writerow([e + 1, *(repr(v) if v != "" else "" for v in left + right)])
    print(f"wrote {path} ({n_rows} epochs)")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            common.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            common.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())

    parser = argparse.ArgumentParser(prog="cpgrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic catalog and interaction log")
    sub.add_parser("ingest", parents=[common], help="5-core filter and split an interaction log")
    sub.add_parser("graph-stats", parents=[common], help="edge counts of all game graphs")
    sub.add_parser("train", parents=[common], help="train a model")
    sub.add_parser("evaluate", parents=[common], help="accuracy and diversity metrics on the test split")
    rec = sub.add_parser("recommend", parents=[common], help="print top-K games per user")
    rec.add_argument("--user", action="append", default=[], dest="users", help="user id (repeatable)")
    case = sub.add_parser("case-study", parents=[common], help="long-tail and deceptive-game exposure per epoch")
    case.add_argument("--nsr-runs", nargs="*", default=[], help="training output dirs with reweighting")
    case.add_argument("--nonsr-runs", nargs="*", default=[], help="paired training output dirs without it")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
        cfg = load_run_config(args.config, overrides)
        _accel.set_threads(cfg.resolved_threads())
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "ingest":
            cmd_ingest(cfg)
        elif args.command == "graph-stats":
            cmd_graph_stats(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "recommend":
            cmd_recommend(cfg, args.users)
        elif args.command == "case-study":
            cmd_case_study(cfg, args.nsr_runs, args.nonsr_runs)
    except ConfigError as exc:
        print(f"cpgrec: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, CommandError, OSError) as exc:
        print(f"cpgrec: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
