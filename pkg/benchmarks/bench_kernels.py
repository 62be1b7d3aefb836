"""Time the jitted kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--games 20000] [--users 100000] [--repeat 5]

Also times one full training epoch under whichever backend the package
picked (set CPGREC_NO_NUMBA=1 to force numpy and compare).
"""
import argparse
import time

import numpy as np

from cpgrec import _accel
from cpgrec.data import SynthConfig, apply_user_5core, generate_synthetic, split_interactions
from cpgrec.graphs import SparseGraph
from cpgrec.kernels import bpr_nsr_batch_numba, bpr_nsr_batch_numpy, csr_spmm_numba, csr_spmm_numpy
from cpgrec.propagation import normalize_game_graph
from cpgrec.training import Hyperparams, train


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def row(name, t_numba, t_numpy):
    print(f"{name:<28}{t_numba * 1e3:>12.2f}{t_numpy * 1e3:>12.2f}{t_numpy / t_numba:>10.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--games", type=int, default=20_000)
    ap.add_argument("--avg-degree", type=int, default=40)
    ap.add_argument("--users", type=int, default=100_000)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    n_edges = args.games * args.avg_degree // 2
    g = normalize_game_graph(SparseGraph.from_edges(args.games, rng.integers(args.games, size=n_edges),
                                                    rng.integers(args.games, size=n_edges)))
    x = rng.normal(size=(args.games, args.dim))
    a = csr_spmm_numba(g.indptr, g.indices, g.data, x)
    b = csr_spmm_numpy(g.indptr, g.indices, g.data, x)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)

    eu = rng.normal(size=(args.users, args.dim))
    ei = rng.normal(size=(args.games, args.dim))
    users = rng.integers(args.users, size=args.batch)
    pos, neg = rng.integers(args.games, size=(2, args.batch))
    la = bpr_nsr_batch_numba(eu, ei, users, pos, neg, 6.5, True)[0]
    lb = bpr_nsr_batch_numpy(eu, ei, users, pos, neg, 6.5, True)[0]
    assert abs(la - lb) <= 1e-9 * max(1.0, abs(lb))

    print(f"threads: {_accel.numba.get_num_threads()}  graph: {args.games} nodes, {g.nnz} stored entries, "
          f"dim {args.dim}")
    print(f"{'kernel':<28}{'numba ms':>12}{'numpy ms':>12}{'speedup':>11}")
    row("csr_spmm", best_of(lambda: csr_spmm_numba(g.indptr, g.indices, g.data, x), args.repeat),
        best_of(lambda: csr_spmm_numpy(g.indptr, g.indices, g.data, x), args.repeat))
    row(f"bpr_nsr_batch (b={args.batch})",
        best_of(lambda: bpr_nsr_batch_numba(eu, ei, users, pos, neg, 6.5, True), args.repeat),
        best_of(lambda: bpr_nsr_batch_numpy(eu, ei, users, pos, neg, 6.5, True), args.repeat))

    catalog, log = generate_synthetic(SynthConfig(seed=args.seed))
    split = split_interactions(apply_user_5core(log), seed=args.seed)
    hp = Hyperparams(max_epochs=1, seed=args.seed)
    train(split, catalog, hp)
    t = time.perf_counter()
    train(split, catalog, hp)
    print(f"one epoch on the default synthetic set ({_accel.backend_name()} backend): "
          f"{time.perf_counter() - t:.2f}s")


if __name__ == "__main__":
    main()
