"""
dataset.py - Interaction splits and modality features
Loads `user<TAB>item` split files and per-modality feature matrices,
validates them and writes them back in the same layout.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import DimensionError, IntegrityError, ParseError
from .storage import read_matrix, read_sidecar, write_matrix, write_sidecar

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_FILES = {"train": "train.txt", "val": "val.txt", "test": "test.txt"}
USER_CATALOG = "users.txt"
ITEM_CATALOG = "items.txt"
SIDECAR = "manifest.json"


@dataclass(frozen=True)
class ModalityFeatures:
    modality_id: str
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def num_items(self) -> int:
        return int(self.matrix.shape[0])


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Dense-indexed train/val/test interactions; arrays are (n, 2) of (user, item)"""
    num_users: int
    num_items: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    user_ids: Tuple[str, ...] = field(default=())
    item_ids: Tuple[str, ...] = field(default=())

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"Unknown split '{name}'")
        return getattr(self, name)

    def itemsets(self, name: str) -> List[np.ndarray]:
        """Sorted item arrays per user for one split"""
        pairs = self.split(name)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        bounds = np.searchsorted(pairs[:, 0], np.arange(self.num_users + 1))
        return [pairs[bounds[u]:bounds[u + 1], 1] for u in range(self.num_users)]

    @cached_property
    def train_itemsets(self) -> List[np.ndarray]:
        return self.itemsets("train")

    def interaction_matrix(self, name: str = "train") -> sp.csr_matrix:
        pairs = self.split(name)
        data = np.ones(len(pairs), dtype=np.float64)
        return sp.csr_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(self.num_users, self.num_items))

    def with_train(self, train: np.ndarray) -> "InteractionDataset":
        return replace(self, train=np.asarray(train, dtype=np.int64).reshape(-1, 2))

    def to_frame(self, name: str) -> pd.DataFrame:
        pairs = self.split(name)
        frame = pd.DataFrame({"user": pairs[:, 0], "item": pairs[:, 1]})
        if self.user_ids:
            frame["user"] = [self.user_ids[u] for u in pairs[:, 0]]
            frame["item"] = [self.item_ids[i] for i in pairs[:, 1]]
        return frame


def _pair_codes(pairs: np.ndarray, num_items: int) -> np.ndarray:
    return pairs[:, 0].astype(np.int64) * num_items + pairs[:, 1].astype(np.int64)


def validate_dataset(dataset: InteractionDataset) -> InteractionDataset:
    """Check index ranges, per-split duplicates and that val/test users appear in train"""
    for name in SPLITS:
        pairs = dataset.split(name)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise DimensionError(f"{name} split must be (n, 2), got {pairs.shape}")
        if len(pairs) == 0:
            continue
        if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= dataset.num_users:
            raise IntegrityError(f"{name} split has user index outside [0, {dataset.num_users})")
        if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= dataset.num_items:
            raise IntegrityError(f"{name} split has item index outside [0, {dataset.num_items})")
        codes = _pair_codes(pairs, dataset.num_items)
        unique, counts = np.unique(codes, return_counts=True)
        if np.any(counts > 1):
            dup = int(unique[np.argmax(counts > 1)])
            raise IntegrityError(
                f"duplicate pair (user={dup // dataset.num_items}, item={dup % dataset.num_items}) in {name} split"
            )

    train_users = np.unique(dataset.train[:, 0])
    for name in ("val", "test"):
        users = np.unique(dataset.split(name)[:, 0])
        orphans = np.setdiff1d(users, train_users)
        if len(orphans):
            raise IntegrityError(f"{len(orphans)} {name} users have no train interactions (first: {int(orphans[0])})")
    return dataset


def _read_pairs(path) -> List[Tuple[str, str]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[0] or not fields[1]:
                raise ParseError("expected 'user<TAB>item'", path=str(path), line_number=line_number)
            pairs.append((fields[0], fields[1]))
    return pairs


def _read_catalog(path) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def load_dataset(
    train_path,
    val_path,
    test_path,
    feature_paths: Optional[Mapping[str, object]] = None,
    item_catalog_path=None,
    user_catalog_path=None,
) -> Tuple[InteractionDataset, List[ModalityFeatures]]:
    """Load and validate splits; IDs are mapped to dense indices by sorted string order"""
    raw = {name: _read_pairs(path) for name, path in zip(SPLITS, (train_path, val_path, test_path))}

    users = {u for pairs in raw.values() for u, _ in pairs}
    items = {i for pairs in raw.values() for _, i in pairs}
    if user_catalog_path is not None:
        catalog = set(_read_catalog(user_catalog_path))
        if not users <= catalog:
            raise IntegrityError(f"{len(users - catalog)} users missing from catalog {user_catalog_path}")
        users = catalog
    if item_catalog_path is not None:
        catalog = set(_read_catalog(item_catalog_path))
        if not items <= catalog:
            raise IntegrityError(f"{len(items - catalog)} items missing from catalog {item_catalog_path}")
        items = catalog

    user_ids = tuple(sorted(users))
    item_ids = tuple(sorted(items))
    user_index = {u: idx for idx, u in enumerate(user_ids)}
    item_index = {i: idx for idx, i in enumerate(item_ids)}

    arrays = {}
    for name, pairs in raw.items():
        arr = np.array([(user_index[u], item_index[i]) for u, i in pairs], dtype=np.int64).reshape(-1, 2)
        arrays[name] = arr

    dataset = validate_dataset(InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        train=arrays["train"],
        val=arrays["val"],
        test=arrays["test"],
        user_ids=user_ids,
        item_ids=item_ids,
    ))

    features = []
    for modality_id, path in (feature_paths or {}).items():
        matrix = read_matrix(path)
        if matrix.shape[0] != dataset.num_items:
            raise DimensionError(
                f"features '{modality_id}' have {matrix.shape[0]} rows but the dataset has {dataset.num_items} items"
            )
        features.append(ModalityFeatures(modality_id=modality_id, matrix=matrix))

    logger.info(
        f"Loaded dataset: {dataset.num_users} users, {dataset.num_items} items, "
        f"{len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)} train/val/test pairs, "
        f"modalities={[f.modality_id for f in features]}"
    )
    return dataset, features


def feature_files(data_dir) -> Dict[str, Path]:
    """Map modality id -> feature file for `features_<m>.bin` (or .csv) in a directory"""
    data_dir = Path(data_dir)
    found: Dict[str, Path] = {}
    for path in sorted(data_dir.glob("features_*.csv")) + sorted(data_dir.glob("features_*.bin")):
        found[path.stem[len("features_"):]] = path
    return dict(sorted(found.items()))


def load_dataset_dir(data_dir) -> Tuple[InteractionDataset, List[ModalityFeatures], Dict]:
    """Load the directory layout written by save_dataset"""
    data_dir = Path(data_dir)
    missing = [f for f in SPLIT_FILES.values() if not (data_dir / f).exists()]
    if missing:
        raise FileNotFoundError(f"{data_dir} is missing {missing}")
    user_catalog = data_dir / USER_CATALOG
    item_catalog = data_dir / ITEM_CATALOG
    dataset, features = load_dataset(
        data_dir / SPLIT_FILES["train"],
        data_dir / SPLIT_FILES["val"],
        data_dir / SPLIT_FILES["test"],
        feature_files(data_dir),
        item_catalog_path=item_catalog if item_catalog.exists() else None,
        user_catalog_path=user_catalog if user_catalog.exists() else None,
    )
    return dataset, features, read_sidecar(data_dir / SIDECAR)


def save_dataset(
    dataset: InteractionDataset,
    features: Sequence[ModalityFeatures],
    out_dir,
    provenance: Optional[List[Dict]] = None,
) -> Path:
    """Write splits, catalogs, feature matrices and the manifest sidecar"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    user_ids = dataset.user_ids or tuple(str(u) for u in range(dataset.num_users))
    item_ids = dataset.item_ids or tuple(str(i) for i in range(dataset.num_items))

    for name in SPLITS:
        pairs = dataset.split(name)
        with open(out_dir / SPLIT_FILES[name], "w", encoding="utf-8") as f:
            for u, i in pairs:
                f.write(f"{user_ids[u]}\t{item_ids[i]}\n")
    (out_dir / USER_CATALOG).write_text("".join(f"{u}\n" for u in user_ids), encoding="utf-8")
    (out_dir / ITEM_CATALOG).write_text("".join(f"{i}\n" for i in item_ids), encoding="utf-8")

    for feat in features:
        write_matrix(out_dir / f"features_{feat.modality_id}.bin", feat.matrix)

    write_sidecar(out_dir / SIDECAR, {
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "counts": {name: int(len(dataset.split(name))) for name in SPLITS},
        "modalities": {feat.modality_id: feat.dim for feat in features},
        "noise": list(provenance or []),
    })
    logger.info(f"Saved dataset to {out_dir}")
    return out_dir


def mean_cosine_similarity(matrix: np.ndarray) -> float:
    """Mean of the full |I|x|I| cosine matrix, zero-norm rows counting as 0"""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    unit = np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)
    total = unit.sum(axis=0)
    return float(total @ total) / float(len(matrix)) ** 2


def dataset_stats(dataset: InteractionDataset, features: Sequence[ModalityFeatures]) -> pd.DataFrame:
    """One-row statistics table: |D|, |U|, |I|, sparsity and mean similarity per modality"""
    observations = sum(len(dataset.split(name)) for name in SPLITS)
    row = {
        "observations": observations,
        "users": dataset.num_users,
        "items": dataset.num_items,
        "sparsity": 1.0 - observations / float(max(dataset.num_users * dataset.num_items, 1)),
    }
    for feat in features:
        row[f"mean_similarity_{feat.modality_id}"] = mean_cosine_similarity(feat.matrix)
    return pd.DataFrame([row])
