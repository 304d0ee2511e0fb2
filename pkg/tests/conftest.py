import os
from pathlib import Path

import numpy as np
import pytest

from fedncf.dataset import InteractionDataset, Schema, binarize_and_filter, leave_one_out_split, load_interactions

ROOT = Path(__file__).resolve().parents[1]
ML100K_SCHEMA = Schema(skip_header=1)


def ml100k_path():
    env = os.environ.get("FEDNCF_ML100K")
    candidates = [Path(env)] if env else []
    candidates += [ROOT / "data" / "ml-100k.inter", ROOT / "data" / "u.data"]
    for path in candidates:
        if path.exists():
            return path
    return None


@pytest.fixture(scope="session")
def ml100k():
    path = ml100k_path()
    if path is None:
        pytest.fail(
            "MovieLens 100K not found; run `python scripts/fetch_ml100k.py` "
            "or set FEDNCF_ML100K to a u.data-layout file"
        )
    schema = ML100K_SCHEMA if path.suffix == ".inter" else Schema()
    return binarize_and_filter(load_interactions(path, schema), 5)


@pytest.fixture(scope="session")
def ml100k_split(ml100k):
    return leave_one_out_split(ml100k, 100, np.random.default_rng(0))


def toy_dataset(num_users=12, num_items=40, per_user=(4, 9), seed=0) -> InteractionDataset:
    rng = np.random.default_rng(seed)
    users, items, stamps = [], [], []
    for u in range(num_users):
        k = rng.integers(per_user[0], per_user[1] + 1)
        chosen = rng.choice(num_items, size=k, replace=False)
        users += [u] * k
        items += chosen.tolist()
        stamps += rng.permutation(k).tolist()
    # guarantee every item id is used at least once
    missing = sorted(set(range(num_items)) - set(items))
    for idx, item in enumerate(missing):
        u = idx % num_users
        if item not in [i for uu, i in zip(users, items) if uu == u]:
            users.append(u)
            items.append(item)
            stamps.append(100 + idx)
    return InteractionDataset(num_users, num_items, np.array(users), np.array(items), np.array(stamps))


@pytest.fixture
def toy_split():
    return leave_one_out_split(toy_dataset(), 10, np.random.default_rng(1))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
