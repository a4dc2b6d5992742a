"""
Shared fixtures: hand-built tiny datasets and a small planted-block dataset on disk
"""

import numpy as np
import pytest

from damrs.dataset import InteractionDataset, ModalityFeatures, save_dataset
from damrs.preparation import make_planted_dataset


def make_dataset(num_users, num_items, train, val=(), test=()):
    as_pairs = lambda pairs: np.array(list(pairs), dtype=np.int64).reshape(-1, 2)
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=as_pairs(train),
        val=as_pairs(val),
        test=as_pairs(test),
    )


@pytest.fixture
def tiny_dataset():
    """3 users, 3 items; user 0 is validated on item 2, user 1 tested on item 0"""
    return make_dataset(3, 3, [(0, 0), (0, 1), (1, 1), (2, 2)], val=[(0, 2)], test=[(1, 0)])


@pytest.fixture
def tiny_files(tmp_path):
    """Split files with external IDs for the tiny dataset"""
    (tmp_path / "train.txt").write_text("u0\ti0\nu0\ti1\nu1\ti1\nu2\ti2\n", encoding="utf-8")
    (tmp_path / "val.txt").write_text("u0\ti2\n", encoding="utf-8")
    (tmp_path / "test.txt").write_text("u1\ti0\n", encoding="utf-8")
    return tmp_path


@pytest.fixture
def random_features():
    rng = np.random.default_rng(3)
    return [
        ModalityFeatures("v", rng.normal(size=(12, 5)).astype(np.float32)),
        ModalityFeatures("t", rng.normal(size=(12, 4)).astype(np.float32)),
    ]


@pytest.fixture
def planted():
    return make_planted_dataset(num_users=60, num_items=30, num_blocks=3, dims=(8, 6), seed=1)


@pytest.fixture
def planted_dir(tmp_path, planted):
    dataset, features = planted
    return save_dataset(dataset, features, tmp_path / "data")


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path, monkeypatch):
    monkeypatch.setenv("DAMRS_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("DAMRS_THREADS", "1")
