import os
import subprocess
import sys

import numpy as np
import pytest

from cpgrec import kernels
from cpgrec.graphs import SparseGraph
from cpgrec.model import load_checkpoint


def _random_csr(rng, n, density=0.2):
    a = rng.random((n, n)) < density
    src, dst = np.nonzero(a)
    g = SparseGraph.from_edges(n, src, dst, rng.normal(size=len(src)), symmetric=False)
    return g


@pytest.mark.parametrize("impl", [kernels.csr_spmm_numba, kernels.csr_spmm_numpy])
def test_spmm_matches_dense(rng, impl):
    for n in (1, 7, 40):
        g = _random_csr(rng, n)
        x = rng.normal(size=(n, 5))
        np.testing.assert_allclose(impl(g.indptr, g.indices, g.data, x), g.to_dense() @ x, atol=1e-12)


def test_spmm_backends_bit_identical(rng):
    g = _random_csr(rng, 60, 0.3)
    x = rng.normal(size=(60, 8))
    a = kernels.csr_spmm_numba(g.indptr, g.indices, g.data, x)
    b = kernels.csr_spmm_numpy(g.indptr, g.indices, g.data, x)
    assert np.array_equal(a, b)


def test_spmm_empty_rows():
    g = SparseGraph.empty(4)
    out = kernels.csr_spmm(g.indptr, g.indices, g.data, np.ones((4, 3)))
    assert np.array_equal(out, np.zeros((4, 3)))


@pytest.mark.parametrize("use_nsr", [True, False])
def test_bpr_backends_agree(rng, use_nsr):
    eu, ei = rng.normal(size=(10, 4)), rng.normal(size=(12, 4))
    users = rng.integers(10, size=50)
    pos, neg = rng.integers(12, size=50), rng.integers(12, size=50)
    a = kernels.bpr_nsr_batch_numba(eu, ei, users, pos, neg, 6.5, use_nsr)
    b = kernels.bpr_nsr_batch_numpy(eu, ei, users, pos, neg, 6.5, use_nsr)
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-13)
    np.testing.assert_allclose(a[2], b[2], atol=1e-13)


def test_bpr_scalar_oracle():
    eu = np.array([[0.3, -0.2]])
    ei = np.array([[1.0, 0.5], [-0.4, 0.9]])
    loss, gu, gi = kernels.bpr_nsr_batch(eu, ei, [0], [0], [1], 6.5, True)
    r_pos = 0.3 * 1.0 + -0.2 * 0.5
    r_neg = 0.3 * -0.4 + -0.2 * 0.9
    s = 1 / (1 + np.exp(-r_neg))
    x = r_pos - 6.5 * s * r_neg
    assert loss == pytest.approx(-np.log(1 / (1 + np.exp(-x))), abs=1e-12)


def test_empty_batch():
    loss, gu, gi = kernels.bpr_nsr_batch(np.ones((2, 3)), np.ones((4, 3)), [], [], [], 6.5)
    assert loss == 0.0 and not gu.any() and not gi.any()


def test_env_flag_selects_numpy_backend():
    code = "from cpgrec import _accel; print(_accel.backend_name())"
    forced = subprocess.run([sys.executable, "-c", code], env={**os.environ, "CPGREC_NO_NUMBA": "1"},
                            capture_output=True, text=True, check=True)
    assert forced.stdout.strip() == "numpy"
    default = subprocess.run([sys.executable, "-c", code], env={k: v for k, v in os.environ.items()
                                                                 if k != "CPGREC_NO_NUMBA"},
                             capture_output=True, text=True, check=True)
    assert default.stdout.strip() == "numba"


def test_training_identical_across_backends(tmp_path):
    code = ("import sys, numpy as np\n"
            "from cpgrec.data import SynthConfig, generate_synthetic, split_interactions\n"
            "from cpgrec.training import Hyperparams, train\n"
            "from cpgrec.model import save_checkpoint\n"
            "cat, log = generate_synthetic(SynthConfig(num_users=60, num_games=25, num_genres=4, "
            "interactions_per_user=6, seed=2))\n"
            "p, h = train(split_interactions(log, seed=2), cat, Hyperparams(dim=8, batch_size=64, max_epochs=2))\n"
            "save_checkpoint(p, sys.argv[1])\n")
    for name, flag in (("numba", "0"), ("numpy", "1")):
        subprocess.run([sys.executable, "-c", code, str(tmp_path / name)],
                       env={**os.environ, "CPGREC_NO_NUMBA": flag}, check=True)
    a = load_checkpoint(tmp_path / "numba")
    b = load_checkpoint(tmp_path / "numpy")
    for x, y in zip(a.arrays().values(), b.arrays().values()):
        np.testing.assert_allclose(x, y, rtol=1e-4, atol=1e-6)
