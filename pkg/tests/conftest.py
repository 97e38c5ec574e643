import numpy as np
import pytest

from mdals import kernels
from mdals.data import RatingDataset, RatingLog, prepare
from mdals.synthetic import SyntheticConfig, generate

BACKENDS = list(kernels.available_backends())


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(users, items, labels, split=None):
    """Dense dataset straight from index arrays (all rows train unless ``split`` is given)."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = users.size
    nu = int(users.max()) + 1 if n else 0
    ni = int(items.max()) + 1 if n else 0
    return RatingDataset(
        users,
        items,
        np.asarray(labels, dtype=np.float64),
        np.zeros(n, dtype=np.int8) if split is None else np.asarray(split, dtype=np.int8),
        np.arange(n, dtype=np.int64),
        np.array([str(k) for k in range(nu)]),
        np.array([str(k) for k in range(ni)]),
    )


def random_dataset(rng, num_users, num_items, per_user, val_frac=0.0):
    """Every user and item gets at least one train rating."""
    users, items = [], []
    for u in range(num_users):
        chosen = rng.choice(num_items, size=min(per_user, num_items), replace=False)
        users.extend([u] * chosen.size)
        items.extend(chosen.tolist())
    # make sure every item is covered
    for i in range(num_items):
        users.append(int(rng.integers(num_users)))
        items.append(i)
    pairs = sorted(set(zip(users, items)))
    users = np.array([p[0] for p in pairs])
    items = np.array([p[1] for p in pairs])
    labels = (rng.random(users.size) < 0.5).astype(float)
    split = np.zeros(users.size, dtype=np.int8)
    if val_frac:
        split[rng.random(users.size) < val_frac] = 1
    return make_dataset(users, items, labels, split)


@pytest.fixture(scope="session")
def synthetic_ds():
    """Small prepared synthetic dataset shared by slower tests."""
    return prepare(generate(SyntheticConfig(num_users=500, num_items=500, interactions=20_000, seed=3)))


@pytest.fixture(scope="session")
def synthetic_log():
    return generate(SyntheticConfig(num_users=300, num_items=300, interactions=8000, seed=1))


__all__ = ["ACCEPTANCE", "make_dataset", "random_dataset", "RatingLog"]


# (criterion, passed, detail) lines recorded by the acceptance suite
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num:>2}: {detail}")
