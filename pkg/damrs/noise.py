"""
noise.py - Controlled noise injection
Feature replacement on one modality and feedback addition/removal on the
train split. All sampling goes through numpy's PCG64 generator seeded from
the NoiseSpec, so identical (input, spec) pairs give identical outputs.
"""

import logging
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import MAX_TESTED_NOISE_RATIO, NoiseSpec
from .dataset import InteractionDataset, ModalityFeatures, SPLITS, validate_dataset
from .errors import ConfigError, SaturationError

logger = logging.getLogger(__name__)

# above this occupancy the absent pairs are enumerated instead of rejection-sampled
DENSE_OCCUPANCY = 0.5


def noise_count(ratio: float, population: int) -> int:
    """ceil(ratio * population), rounded first so 0.05 * 7050 gives 353 and not 354"""
    return int(math.ceil(round(ratio * population, 9)))


def _check_ratio(spec: NoiseSpec):
    if not 0.0 <= spec.ratio <= 1.0:
        raise ConfigError(f"noise ratio {spec.ratio} outside [0, 1]")
    if spec.ratio > MAX_TESTED_NOISE_RATIO and not spec.allow_large_ratio:
        raise ConfigError(f"noise ratio {spec.ratio} exceeds {MAX_TESTED_NOISE_RATIO} without override")


def inject_feature_noise(features: ModalityFeatures, spec: NoiseSpec) -> ModalityFeatures:
    """Replace ceil(ratio*|I|) rows with the original row of another uniformly chosen item"""
    if spec.kind != "feature-replace":
        raise ConfigError(f"inject_feature_noise needs kind=feature-replace, got {spec.kind}")
    _check_ratio(spec)
    if spec.target_modality != features.modality_id:
        raise ConfigError(f"noise targets modality '{spec.target_modality}' but got '{features.modality_id}'")

    original = features.matrix
    num_items = original.shape[0]
    count = noise_count(spec.ratio, num_items)
    if count == 0:
        return ModalityFeatures(features.modality_id, original.copy())
    if num_items < 2:
        raise SaturationError("feature replacement needs at least two items")

    rng = np.random.default_rng(spec.seed)
    victims = rng.choice(num_items, size=count, replace=False)
    # uniform over j != i: draw from n-1 slots and skip over i
    sources = rng.integers(0, num_items - 1, size=count)
    sources = sources + (sources >= victims)

    noisy = original.copy()
    noisy[victims] = original[sources]
    logger.info(f"Replaced {count}/{num_items} feature rows of modality '{features.modality_id}'")
    return ModalityFeatures(features.modality_id, noisy)


def _remove_feedback(dataset: InteractionDataset, count: int, rng: np.random.Generator) -> np.ndarray:
    train = dataset.train
    protected = np.zeros(dataset.num_users, dtype=bool)
    protected[dataset.val[:, 0]] = True
    protected[dataset.test[:, 0]] = True
    remaining = np.bincount(train[:, 0], minlength=dataset.num_users)

    keep = np.ones(len(train), dtype=bool)
    removed = 0
    for idx in rng.permutation(len(train)):
        if removed == count:
            break
        user = train[idx, 0]
        # never take the last train pair of a user who still has val/test data
        if protected[user] and remaining[user] <= 1:
            continue
        keep[idx] = False
        remaining[user] -= 1
        removed += 1
    if removed < count:
        raise SaturationError(
            f"only {removed} of {count} train pairs can be removed without orphaning val/test users"
        )
    return train[keep]


def _add_feedback(dataset: InteractionDataset, count: int, rng: np.random.Generator) -> np.ndarray:
    total = dataset.num_users * dataset.num_items
    occupied = np.unique(np.concatenate([
        dataset.split(name)[:, 0] * dataset.num_items + dataset.split(name)[:, 1] for name in SPLITS
    ]))
    available = total - len(occupied)
    if available < count:
        raise SaturationError(f"need {count} absent pairs but only {available} exist")

    if len(occupied) > DENSE_OCCUPANCY * total:
        absent = np.setdiff1d(np.arange(total, dtype=np.int64), occupied, assume_unique=True)
        chosen = rng.choice(absent, size=count, replace=False)
    else:
        chosen = np.empty(0, dtype=np.int64)
        while len(chosen) < count:
            draw = rng.integers(0, total, size=2 * (count - len(chosen)) + 16)
            draw = draw[~np.isin(draw, occupied)]
            merged = np.concatenate([chosen, draw])
            _, first = np.unique(merged, return_index=True)
            chosen = merged[np.sort(first)]
        chosen = chosen[:count]

    added = np.stack([chosen // dataset.num_items, chosen % dataset.num_items], axis=1)
    return np.concatenate([dataset.train, added.astype(np.int64)], axis=0)


def inject_feedback_noise(dataset: InteractionDataset, spec: NoiseSpec) -> InteractionDataset:
    """Add or remove ceil(ratio*|train|) train pairs; val and test are untouched"""
    if spec.kind not in ("feedback-add", "feedback-remove"):
        raise ConfigError(f"inject_feedback_noise needs a feedback kind, got {spec.kind}")
    _check_ratio(spec)
    count = noise_count(spec.ratio, len(dataset.train))
    if count == 0:
        return dataset

    rng = np.random.default_rng(spec.seed)
    if spec.kind == "feedback-remove":
        train = _remove_feedback(dataset, count, rng)
    else:
        train = _add_feedback(dataset, count, rng)
    logger.info(f"{spec.kind}: train pairs {len(dataset.train)} -> {len(train)}")
    return validate_dataset(dataset.with_train(train))


def apply_noise(
    dataset: InteractionDataset,
    features: Sequence[ModalityFeatures],
    spec: NoiseSpec,
) -> Tuple[InteractionDataset, List[ModalityFeatures], Dict]:
    """Dispatch on spec.kind and return a provenance record for the sidecar"""
    features = list(features)
    before = len(dataset.train)
    if spec.kind == "feature-replace":
        matches = [idx for idx, feat in enumerate(features) if feat.modality_id == spec.target_modality]
        if not matches:
            raise ConfigError(
                f"modality '{spec.target_modality}' not found; available {[f.modality_id for f in features]}"
            )
        idx = matches[0]
        features[idx] = inject_feature_noise(features[idx], spec)
        affected = noise_count(spec.ratio, dataset.num_items)
    else:
        dataset = inject_feedback_noise(dataset, spec)
        affected = abs(len(dataset.train) - before)
    record = dict(spec.model_dump(), affected=affected)
    return dataset, features, record
