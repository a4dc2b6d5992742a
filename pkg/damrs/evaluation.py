"""
evaluation.py - Full-ranking top-K evaluation (Recall, Precision, NDCG)
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set

import numpy as np
import pandas as pd
import torch

from .dataset import InteractionDataset

logger = logging.getLogger(__name__)

USER_BLOCK = 1024
METRICS = ("recall", "precision", "ndcg")


def rank_items(scores: np.ndarray, exclusions: Optional[Sequence[int]], k: int) -> np.ndarray:
    """Items by descending score, exclusions removed, ties to the lower index, at most k"""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if exclusions is not None and len(exclusions):
        excluded = np.zeros(len(scores), dtype=bool)
        excluded[np.asarray(exclusions, dtype=np.int64)] = True
        order = order[~excluded[order]]
    return order[:k]


def metrics_at_k(ranked: Sequence[int], truth: Set[int], k: int):
    """(recall, precision, ndcg) with binary gains and IDCG over min(|truth|, k) ranks"""
    if not truth:
        raise ValueError("metrics_at_k needs a nonempty ground truth")
    top = list(ranked)[:k]
    hits = np.array([item in truth for item in top], dtype=np.float64)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float((hits * discounts[:len(top)]).sum())
    idcg = float(discounts[:min(len(truth), k)].sum())
    n_hits = float(hits.sum())
    return n_hits / len(truth), n_hits / k, dcg / idcg


@dataclass
class RankingResult:
    ks: List[int]
    summary: pd.DataFrame
    per_user: pd.DataFrame
    top_lists: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return int(self.per_user["user"].nunique()) if len(self.per_user) else 0

    def metric(self, name: str, k: int) -> float:
        row = self.summary.loc[self.summary["k"] == k]
        if row.empty:
            raise KeyError(f"K={k} was not evaluated")
        return float(row[name].iloc[0])

    def as_dict(self) -> Dict[str, float]:
        return {f"{name}@{k}": self.metric(name, k) for k in self.ks for name in METRICS}


def _to_numpy(tensor) -> np.ndarray:
    if isinstance(tensor, torch.Tensor):
        return tensor.detach().cpu().to(torch.float64).numpy()
    return np.asarray(tensor, dtype=np.float64)


def evaluate_split(
    model,
    dataset: InteractionDataset,
    split: str,
    ks: Sequence[int] = (10, 20),
    exclude_val: bool = True,
) -> RankingResult:
    """
    Rank every item for each user with ground truth in `split`, excluding train
    items (and val items when split is test), then macro-average over those users.
    `model` is anything exposing representations() -> (user, item) tables.
    """
    ks = sorted(set(int(k) for k in ks))
    max_k = max(ks)
    user, item = (_to_numpy(x) for x in model.representations())

    truth = dataset.itemsets(split)
    excluded_sets = [dataset.train_itemsets]
    if split == "test" and exclude_val:
        excluded_sets.append(dataset.itemsets("val"))
    evaluated = np.array([u for u in range(dataset.num_users) if len(truth[u])], dtype=np.int64)

    rows, top_lists = [], {}
    for start in range(0, len(evaluated), USER_BLOCK):
        block = evaluated[start:start + USER_BLOCK]
        scores = user[block] @ item.T
        for row, u in enumerate(block):
            exclusions = np.concatenate([sets[u] for sets in excluded_sets])
            ranked = rank_items(scores[row], exclusions, max_k)
            top_lists[int(u)] = ranked
            truth_set = set(int(i) for i in truth[u])
            for k in ks:
                recall, precision, ndcg = metrics_at_k(ranked, truth_set, k)
                rows.append({"user": int(u), "k": k, "recall": recall, "precision": precision, "ndcg": ndcg})

    per_user = pd.DataFrame(rows, columns=["user", "k", *METRICS])
    if per_user.empty:
        logger.warning(f"No users with ground truth in the {split} split; metrics reported as 0")
        summary = pd.DataFrame([{"k": k, "users": 0, **{m: 0.0 for m in METRICS}} for k in ks])
    else:
        summary = per_user.groupby("k", sort=True)[list(METRICS)].mean().reset_index()
        summary.insert(1, "users", len(evaluated))
    return RankingResult(ks=ks, summary=summary, per_user=per_user, top_lists=top_lists)
