import numpy as np
import pytest

from disclosure.data import Interactions, build_dataset


def random_dataset(n_users=6, n_items=10, per_user=5, seed=0, neg_ratio=1):
    """Every user gets ``per_user`` distinct random items."""
    rng = np.random.default_rng(seed)
    users, items = [], []
    for u in range(n_users):
        users += [u] * per_user
        items += rng.choice(n_items, per_user, replace=False).tolist()
    inter = Interactions(n_users, n_items, np.array(users), np.array(items), None)
    return build_dataset(inter, seed=seed, neg_ratio=neg_ratio)


@pytest.fixture
def small():
    return random_dataset()


@pytest.fixture(scope="session")
def tiny_trained():
    """Small dataset with a converged regularized model and its mask."""
    from disclosure.recmodel import TrainerConfig, train_masked

    d = random_dataset(n_users=5, n_items=8, per_user=6, seed=1)
    cfg = TrainerConfig(dim=2, learning_rate=0.05, batch_size=10**6, epochs=4000, tol=1e-8, l2=0.1, seed=0)
    mask = np.ones(d.Z, dtype=bool)
    return d, train_masked(d, mask, cfg), mask, cfg


# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
