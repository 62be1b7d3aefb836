import math
import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpgrec.data import DataError, InteractionLog
from cpgrec.graphs import ThetaConfig
from cpgrec.model import CheckpointError, build_model_graphs, forward_all, init_params, load_checkpoint, save_checkpoint
from cpgrec.propagation import FusionWeights
from cpgrec.training import (
    AdamState,
    Gradients,
    Hyperparams,
    TrainBatch,
    TrainState,
    adam_step,
    bpr_nsr_loss,
    compute_gradients,
    nsr,
    nsr_slope,
    resolve_preset,
    sample_negatives,
    score,
    train,
)

mpmath.mp.dps = 40


def mp_nsr(r, m):
    r = mpmath.mpf(r)
    return mpmath.mpf(m) * r / (1 + mpmath.exp(-r))


def test_score():
    assert score([1, 2], [3, 4]) == 11
    assert score([0, 0], [5, -2]) == 0
    e = np.array([0.3, -1.2, 2.0])
    assert score(e, e) == pytest.approx(np.sum(e ** 2)) and score(e, e) >= 0


def test_nsr_values():
    assert nsr(0.0, 6.5) == 0.0 and nsr(0.0, 2.0) == 0.0
    assert nsr(2.0, 6.5) == pytest.approx(float(mp_nsr(2, 6.5)), abs=1e-12)
    assert nsr(2.0, 6.5) == pytest.approx(11.45036, abs=1e-5)
    assert nsr(-10.0, 6.5) == pytest.approx(float(mp_nsr(-10, 6.5)), rel=1e-12)
    assert nsr(-10.0, 6.5) == pytest.approx(-2.95086e-3, rel=1e-5)


@given(st.floats(-50, 50, allow_nan=False, allow_subnormal=False), st.floats(0.1, 20))
def test_nsr_properties(r, m):
    out = nsr(r, m)
    assert np.sign(out) == np.sign(r)
    assert abs(out) <= m * abs(r) + 1e-12
    if m >= 2 and r >= 0:
        assert out >= r - 1e-12


def test_nsr_tail_and_slope():
    assert abs(nsr(-30.0, 6.5)) < 1e-10
    for r in (-3.0, -0.2, 0.0, 0.7, 4.0):
        h = 1e-6
        assert nsr_slope(r, 6.5) == pytest.approx((nsr(r + h, 6.5) - nsr(r - h, 6.5)) / (2 * h), rel=1e-7, abs=1e-9)


def _setup(small_world, dtype=np.float64, theta=ThetaConfig(3, 0.5, 2), seed=0):
    catalog, split = small_world
    graphs = build_model_graphs(split.train, catalog, theta)
    rng = np.random.default_rng(seed)
    params = init_params(graphs.num_users, graphs.num_games, 8, rng, FusionWeights(0.4, 0.3, 0.3), theta, dtype)
    params.graphwise_query = rng.normal(size=8)
    params.layerwise_query = rng.normal(size=8)
    params.base_user_embeddings *= 4
    params.base_game_embeddings *= 4
    return catalog, split, graphs, params, rng


HP = Hyperparams(dim=8, k_ca=1, k_co=2, k_po=2, l2=0.01)


def test_loss_ln2_when_scores_tie(small_world):
    catalog, split, graphs, params, rng = _setup(small_world)
    zero = params.copy()
    for name in ("base_user_embeddings", "base_game_embeddings"):
        getattr(zero, name)[:] = 0
    zero.graphwise_query[:] = 0
    zero.layerwise_query[:] = 0
    batch = TrainBatch(np.array([0, 1, 2]), np.array([0, 1, 2]), np.array([3, 4, 5]))
    from dataclasses import replace
    assert bpr_nsr_loss(batch, zero, graphs, replace(HP, l2=0.0)) == pytest.approx(math.log(2), abs=1e-15)
    assert bpr_nsr_loss(batch, zero, graphs, replace(HP, l2=0.7)) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_single_triple_oracle(small_world):
    catalog, split, graphs, params, rng = _setup(small_world)
    fw = forward_all(params, graphs, HP.k_ca, HP.k_co, HP.k_po, HP.beta)
    u, i, j = 3, int(split.train.games[split.train.users == 3][0]), 0
    r_pos = sum(a * b for a, b in zip(fw.users[u].tolist(), fw.games[i].tolist()))
    r_neg = sum(a * b for a, b in zip(fw.users[u].tolist(), fw.games[j].tolist()))
    r_tilde = HP.m * r_neg / (1 + math.exp(-r_neg))
    x = r_pos - r_tilde
    reg = sum(float(np.sum(np.asarray(v, dtype=float) ** 2)) for v in params.arrays().values())
    want = math.log1p(math.exp(-x)) + HP.l2 * reg
    got = bpr_nsr_loss(TrainBatch(np.array([u]), np.array([i]), np.array([j])), params, graphs, HP)
    assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_loss_without_nsr_is_plain_bpr(small_world):
    from dataclasses import replace
    catalog, split, graphs, params, rng = _setup(small_world)
    hp = replace(HP, nsr=False)
    fw = forward_all(params, graphs, hp.k_ca, hp.k_co, hp.k_po, hp.beta)
    batch = sample_negatives(split.train, (split.train.users[:20], split.train.games[:20]), rng)
    x = np.einsum("bd,bd->b", fw.users[batch.users], fw.games[batch.pos] - fw.games[batch.neg])
    want = np.mean(np.log1p(np.exp(-x))) + hp.l2 * params.squared_norm()
    assert bpr_nsr_loss(batch, params, graphs, hp) == pytest.approx(want, rel=1e-12)


def test_loss_permutation_invariant(small_world):
    catalog, split, graphs, params, rng = _setup(small_world)
    batch = sample_negatives(split.train, (split.train.users[:30], split.train.games[:30]), rng)
    perm = rng.permutation(30)
    a = bpr_nsr_loss(batch, params, graphs, HP)
    b = bpr_nsr_loss(batch[perm], params, graphs, HP)
    assert a == pytest.approx(b, rel=1e-13)


def _fd_check(batch, params, graphs, hp, rng, per_array=5, h=1e-4):
    _, grads = compute_gradients(batch, params, graphs, hp)
    worst = 0.0
    for name, arr in params.arrays().items():
        for _ in range(per_array):
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            plus = bpr_nsr_loss(batch, params, graphs, hp)
            arr[idx] = old - h
            minus = bpr_nsr_loss(batch, params, graphs, hp)
            arr[idx] = old
            fd = (plus - minus) / (2 * h)
            an = grads.arrays()[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-7))
    return worst


@pytest.mark.parametrize("use_nsr", [True, False])
def test_gradients_match_finite_differences(small_world, use_nsr):
    from dataclasses import replace
    catalog, split, graphs, params, rng = _setup(small_world)
    batch = sample_negatives(split.train, (split.train.users[:40], split.train.games[:40]), rng)
    assert _fd_check(batch, params, graphs, replace(HP, nsr=use_nsr), rng) <= 1e-3


def test_gradient_regulariser_only(small_world):
    from dataclasses import replace
    catalog, split, graphs, params, rng = _setup(small_world)
    empty = TrainBatch(*(np.zeros(0, dtype=np.int64) for _ in range(3)))
    loss, grads = compute_gradients(empty, params, graphs, replace(HP, l2=0.5))
    for name, arr in params.arrays().items():
        np.testing.assert_allclose(grads.arrays()[name], arr, rtol=1e-15)


def test_gradient_zero_signal(small_world):
    from dataclasses import replace
    catalog, split, graphs, params, rng = _setup(small_world)
    # positive and negative are the same game: the data gradient on that game cancels
    u = int(split.train.users[0])
    i = int(split.train.games[0])
    batch = TrainBatch(np.array([u]), np.array([i]), np.array([i]))
    _, grads = compute_gradients(batch, params, graphs, replace(HP, l2=0.0, nsr=False))
    assert all(np.all(np.isfinite(g)) for g in grads.arrays().values())
    assert not any(np.any(g) for g in grads.arrays().values())
    hp = replace(HP, l2=0.25)
    _, grads = compute_gradients(batch, params, graphs, replace(hp, nsr=False))
    for name, arr in params.arrays().items():
        np.testing.assert_allclose(grads.arrays()[name], 0.5 * arr, rtol=1e-12)


def test_sample_negatives_forced():
    log = InteractionLog(("u0",), 4, [0, 0, 0], [0, 1, 3])
    batch = sample_negatives(log, ([0] * 50, [0] * 50), np.random.default_rng(1))
    assert set(batch.neg.tolist()) == {2}


def test_sample_negatives_errors():
    log = InteractionLog(("u0",), 2, [0, 0], [0, 1])
    with pytest.raises(DataError):
        sample_negatives(log, ([0], [0]), np.random.default_rng(0))


def test_sample_negatives_deterministic_and_valid(small_world):
    _, split = small_world
    pos = (split.train.users, split.train.games)
    a = sample_negatives(split.train, pos, np.random.default_rng(5))
    b = sample_negatives(split.train, pos, np.random.default_rng(5))
    assert np.array_equal(a.neg, b.neg)
    train_pairs = split.train.pairs()
    assert all((u, j) not in train_pairs for u, _, j in a.triples)


def test_sample_negatives_uniform():
    n_games, interacted = 10, [0, 4, 7]
    log = InteractionLog(("u0",), n_games, [0] * 3, interacted)
    n = 70_000
    batch = sample_negatives(log, ([0] * n, [0] * n), np.random.default_rng(3))
    counts = np.bincount(batch.neg, minlength=n_games)
    assert counts[interacted].sum() == 0
    p = 1 / 7
    sigma = math.sqrt(n * p * (1 - p))
    eligible = [g for g in range(n_games) if g not in interacted]
    assert np.all(np.abs(counts[eligible] - n * p) <= 3 * sigma)


def _scalar_adam(p, gs, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def _grads_like(params, fill):
    return Gradients(**{k: fill(v) for k, v in params.arrays().items()})


def test_adam(small_world):
    catalog, split, graphs, params, rng = _setup(small_world)
    hp = Hyperparams(learning_rate=0.03)
    same, _ = adam_step(params, _grads_like(params, np.zeros_like), AdamState(), hp)
    assert same.equals(params)

    g = _grads_like(params, lambda v: rng.normal(size=v.shape))
    stepped, state = adam_step(params, g, AdamState(), hp)
    for name in params.arrays():
        delta = stepped.arrays()[name] - params.arrays()[name]
        gv = g.arrays()[name]
        np.testing.assert_allclose(delta, -0.03 * gv / (np.abs(gv) + 1e-8), rtol=1e-12, atol=1e-15)
        assert np.all(np.abs(np.abs(delta) - 0.03) <= 0.03 * 1e-8 / np.abs(gv) + 1e-15)

    twice, _ = adam_step(stepped, g, state, hp)
    name = "base_game_embeddings"
    for idx in [(0, 0), (3, 5), (7, 2)]:
        gv = g.arrays()[name][idx]
        want = _scalar_adam(params.arrays()[name][idx], [gv, gv], 0.03)
        assert twice.arrays()[name][idx] == pytest.approx(want, abs=1e-12)


def test_checkpoint_roundtrip(tmp_path, small_world):
    catalog, split, graphs, params, rng = _setup(small_world, dtype=np.float32)
    path = tmp_path / "m.cpgr"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert back.equals(params.astype(np.float32))
    save_checkpoint(back, tmp_path / "again.cpgr")
    assert (tmp_path / "again.cpgr").read_bytes() == path.read_bytes()

    blob = path.read_bytes()
    (tmp_path / "magic.cpgr").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "ver.cpgr").write_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    (tmp_path / "short.cpgr").write_bytes(blob[:-3])
    for name in ("magic", "ver", "short"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.cpgr")


def test_checkpoint_layout(tmp_path, small_world):
    catalog, split, graphs, params, rng = _setup(small_world, dtype=np.float32)
    save_checkpoint(params, tmp_path / "m.cpgr")
    blob = (tmp_path / "m.cpgr").read_bytes()
    assert blob[:4] == b"CPGR"
    assert struct.unpack_from("<IIII", blob, 4) == (1, params.num_users, params.num_games, 8)
    assert struct.unpack_from("<6d", blob, 20) == (0.4, 0.3, 0.3, 3.0, 0.5, 2.0)
    first = np.frombuffer(blob, dtype="<f4", count=8, offset=68)
    np.testing.assert_array_equal(first, params.base_user_embeddings[0])


def test_presets():
    assert resolve_preset("accuracy_focused") == (FusionWeights(1, 0, 0), ThetaConfig.unit())
    assert resolve_preset("diversity_focused")[0] == FusionWeights(0, 0.5, 0.5)
    assert resolve_preset("balanced") == (FusionWeights(0.4, 0.3, 0.3), ThetaConfig())
    with pytest.raises(ValueError):
        resolve_preset("fast")


TRAIN_HP = Hyperparams(dim=8, batch_size=64, max_epochs=4, patience=10, k_ca=1, k_co=2, k_po=2)


def test_train_zero_epochs(small_world):
    from dataclasses import replace
    catalog, split = small_world
    params, history = train(split, catalog, replace(TRAIN_HP, max_epochs=0))
    assert history == []
    graphs = build_model_graphs(split.train, catalog, ThetaConfig())
    from cpgrec.model import named_rng
    fresh = init_params(graphs.num_users, graphs.num_games, 8, named_rng(TRAIN_HP.seed, "init"))
    assert params.equals(fresh)


def test_train_deterministic(small_world):
    catalog, split = small_world
    a, ha = train(split, catalog, TRAIN_HP)
    b, hb = train(split, catalog, TRAIN_HP)
    assert [r.as_row() for r in ha] == [r.as_row() for r in hb]
    assert a.equals(b)


def test_train_resume_matches_uninterrupted(small_world, tmp_path):
    from dataclasses import replace
    catalog, split = small_world
    full, history = train(split, catalog, TRAIN_HP)
    saved = {}

    def keep(record, state):
        if record.epoch == 2:
            state.save(tmp_path / "state.npz")

    train(split, catalog, replace(TRAIN_HP, max_epochs=2), on_epoch=keep)
    state = TrainState.load(tmp_path / "state.npz")
    resumed, resumed_history = train(split, catalog, TRAIN_HP, resume=state)
    assert [r.as_row() for r in resumed_history] == [r.as_row() for r in history]
    assert resumed.equals(full)


def test_train_early_stopping(small_world):
    from dataclasses import replace
    catalog, split = small_world
    _, history = train(split, catalog, replace(TRAIN_HP, max_epochs=60, patience=2, learning_rate=0.5))
    assert len(history) < 60
