"""
preparation.py - Raw interaction preparation and the planted-block generator
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .dataset import InteractionDataset, ModalityFeatures, validate_dataset
from .errors import DimensionError, IntegrityError

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.8, 0.1, 0.1)


def k_core_filter(frame: pd.DataFrame, core: int = 5) -> pd.DataFrame:
    """Iteratively drop users and items with fewer than `core` interactions"""
    frame = frame.drop_duplicates(subset=["user", "item"]).reset_index(drop=True)
    if core <= 1:
        return frame
    rounds = 0
    while True:
        user_counts = frame["user"].map(frame["user"].value_counts())
        item_counts = frame["item"].map(frame["item"].value_counts())
        mask = (user_counts >= core) & (item_counts >= core)
        if mask.all():
            break
        frame = frame[mask].reset_index(drop=True)
        rounds += 1
    logger.info(f"{core}-core filter converged after {rounds} rounds: {len(frame)} interactions left")
    return frame


def _split_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    n_val = int(math.floor(n * ratios[1] + 0.5))
    n_test = int(math.floor(n * ratios[2] + 0.5))
    while n - n_val - n_test < 1 and (n_val or n_test):
        if n_test >= n_val:
            n_test -= 1
        else:
            n_val -= 1
    return n - n_val - n_test, n_val, n_test


def split_interactions(
    pairs: np.ndarray,
    num_users: int,
    num_items: int,
    seed: int = 0,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    user_ids: Tuple[str, ...] = (),
    item_ids: Tuple[str, ...] = (),
) -> InteractionDataset:
    """Per-user shuffled split; every user keeps at least one train interaction"""
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    pairs = np.unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    rng = np.random.default_rng(seed)

    parts: Dict[str, List[np.ndarray]] = {"train": [], "val": [], "test": []}
    bounds = np.searchsorted(pairs[:, 0], np.arange(num_users + 1))
    for user in range(num_users):
        rows = pairs[bounds[user]:bounds[user + 1]]
        if len(rows) == 0:
            continue
        rows = rows[rng.permutation(len(rows))]
        n_train, n_val, _ = _split_sizes(len(rows), ratios)
        parts["train"].append(rows[:n_train])
        parts["val"].append(rows[n_train:n_train + n_val])
        parts["test"].append(rows[n_train + n_val:])

    arrays = {
        name: (np.concatenate(chunks) if chunks else np.empty((0, 2), dtype=np.int64))
        for name, chunks in parts.items()
    }
    return validate_dataset(InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=arrays["train"],
        val=arrays["val"],
        test=arrays["test"],
        user_ids=user_ids,
        item_ids=item_ids,
    ))


def prepare_raw(
    frame: pd.DataFrame,
    raw_features: Optional[Dict[str, np.ndarray]] = None,
    raw_item_ids: Optional[Sequence[str]] = None,
    core: int = 5,
    seed: int = 0,
) -> Tuple[InteractionDataset, List[ModalityFeatures]]:
    """k-core filter, map IDs by sorted order, split 8:1:1 and align feature rows"""
    frame = k_core_filter(frame.astype(str), core)
    if frame.empty:
        raise IntegrityError(f"no interactions survive the {core}-core filter")
    user_ids = tuple(sorted(frame["user"].unique()))
    item_ids = tuple(sorted(frame["item"].unique()))
    user_index = {u: idx for idx, u in enumerate(user_ids)}
    item_index = {i: idx for idx, i in enumerate(item_ids)}
    pairs = np.stack([
        frame["user"].map(user_index).to_numpy(dtype=np.int64),
        frame["item"].map(item_index).to_numpy(dtype=np.int64),
    ], axis=1)
    dataset = split_interactions(pairs, len(user_ids), len(item_ids), seed=seed,
                                 user_ids=user_ids, item_ids=item_ids)

    features = []
    if raw_features:
        if raw_item_ids is None:
            raise IntegrityError("raw features need the item catalog their rows follow")
        row_of = {str(item): row for row, item in enumerate(raw_item_ids)}
        missing = [i for i in item_ids if i not in row_of]
        if missing:
            raise IntegrityError(f"{len(missing)} items have no feature row (first: {missing[0]})")
        rows = np.array([row_of[i] for i in item_ids], dtype=np.int64)
        for modality_id, matrix in raw_features.items():
            if matrix.shape[0] != len(raw_item_ids):
                raise DimensionError(
                    f"features '{modality_id}' have {matrix.shape[0]} rows for {len(raw_item_ids)} catalog items"
                )
            features.append(ModalityFeatures(modality_id, np.ascontiguousarray(matrix[rows], dtype=np.float32)))
    return dataset, features


def make_planted_dataset(
    num_users: int = 500,
    num_items: int = 200,
    num_blocks: int = 5,
    modalities: Sequence[str] = ("v", "t"),
    dims: Sequence[int] = (32, 16),
    interactions_per_user: int = 10,
    in_block_prob: float = 0.9,
    feature_noise: float = 0.5,
    seed: int = 0,
) -> Tuple[InteractionDataset, List[ModalityFeatures]]:
    """
    Synthetic planted-block data: user u and item i belong to blocks
    u % num_blocks and i * num_blocks // num_items; users mostly interact
    inside their block; each modality's features are block centroids plus
    Gaussian noise.
    """
    if len(dims) != len(modalities):
        raise ValueError("one dimension per modality is required")
    rng = np.random.default_rng(seed)
    item_block = np.arange(num_items) * num_blocks // num_items
    members = [np.flatnonzero(item_block == b) for b in range(num_blocks)]
    outsiders = [np.flatnonzero(item_block != b) for b in range(num_blocks)]

    pairs = []
    for user in range(num_users):
        block = user % num_blocks
        n_in = min(int(rng.binomial(interactions_per_user, in_block_prob)), len(members[block]))
        n_out = min(interactions_per_user - n_in, len(outsiders[block]))
        chosen = np.concatenate([
            rng.choice(members[block], size=n_in, replace=False),
            rng.choice(outsiders[block], size=n_out, replace=False),
        ])
        pairs.extend((user, int(item)) for item in chosen)

    user_ids = tuple(f"u{u:05d}" for u in range(num_users))
    item_ids = tuple(f"i{i:05d}" for i in range(num_items))
    dataset = split_interactions(np.array(pairs, dtype=np.int64), num_users, num_items, seed=seed,
                                 user_ids=user_ids, item_ids=item_ids)

    features = []
    for modality_id, dim in zip(modalities, dims):
        centroids = rng.normal(size=(num_blocks, dim))
        matrix = centroids[item_block] + feature_noise * rng.normal(size=(num_items, dim))
        features.append(ModalityFeatures(modality_id, matrix.astype(np.float32)))
    logger.info(
        f"Generated planted dataset: {num_users} users, {num_items} items, {num_blocks} blocks, "
        f"{len(pairs)} interactions"
    )
    return dataset, features
