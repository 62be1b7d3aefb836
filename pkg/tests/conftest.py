import numpy as np
import pytest

from cpgrec.data import GameCatalog, SynthConfig, apply_user_5core, generate_synthetic, split_interactions


def random_catalog(rng, n_games, n_labels=(4, 6, 5), max_labels=2, p_empty=0.1):
    rows = []
    for i in range(n_games):
        sets = []
        for n in n_labels:
            if rng.random() < p_empty:
                sets.append(set())
            else:
                k = int(rng.integers(1, max_labels + 1))
                sets.append({f"L{x}" for x in rng.choice(n, size=min(k, n), replace=False)})
        rows.append((f"g{i}", *sets))
    return GameCatalog.from_rows(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_world():
    """Tiny synthetic catalog plus split, for training-level tests."""
    cfg = SynthConfig(num_users=40, num_games=30, num_genres=3, num_developers=5, num_publishers=4,
                      interactions_per_user=8, seed=3)
    catalog, log = generate_synthetic(cfg)
    split = split_interactions(apply_user_5core(log, 5), seed=0)
    return catalog, split


@pytest.fixture(scope="session")
def synthetic_1000():
    """The acceptance-scale synthetic dataset: 1000 users, 200 games, Zipf 1.0."""
    catalog, log = generate_synthetic(SynthConfig(num_users=1000, num_games=200, zipf_exponent=1.0, seed=7))
    return catalog, split_interactions(apply_user_5core(log, 5), seed=7)


ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then return whether it passed."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
