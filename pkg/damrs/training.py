"""
training.py - Triple sampling, the Adam loop with early stopping, and the
finite-difference gradient checker
"""

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from .config import GraphConfig, TrainConfig
from .dataset import InteractionDataset, ModalityFeatures
from .errors import DivergenceError, PreconditionError
from .evaluation import evaluate_split
from .graphs import SparseItemGraph, build_item_graphs
from .losses import LossBreakdown, ObjectiveSpec, TripleBatch, batch_objective
from .model import DamrsModel, build_model

logger = logging.getLogger(__name__)

GRAD_CHECK_STEP = 1e-4
GRAD_CHECK_TOLERANCE = 1e-4
# denominators below this are clamped, so near-zero entries are held to an absolute error of 1e-6
GRAD_CHECK_FLOOR = 1e-2
LOSS_SELECTORS = ("bpr", "dbpr", "dbpr-detached", "au", "ai-mm", "ai-s", "total")


# Sampling

def sample_triples(
    dataset: InteractionDataset,
    batch_size: int,
    seed: int,
    epoch: int,
) -> List[TripleBatch]:
    """
    One triple per train pair in shuffled order, cut into batches. Negatives are
    rejection-sampled from the items outside the user's train set. The PCG64
    stream is keyed by (seed, epoch).
    """
    train = dataset.train
    if len(train) == 0:
        raise PreconditionError("cannot sample triples from an empty train split")
    counts = np.bincount(train[:, 0], minlength=dataset.num_users)
    full = np.flatnonzero(counts >= dataset.num_items)
    if len(full):
        raise PreconditionError(f"user {int(full[0])} interacted with every item; no negative exists")

    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(train))
    users = train[order, 0]
    pos = train[order, 1]
    train_codes = np.sort(train[:, 0] * dataset.num_items + train[:, 1])

    neg = rng.integers(0, dataset.num_items, size=len(train))
    pending = np.flatnonzero(np.isin(users * dataset.num_items + neg, train_codes, assume_unique=False))
    while len(pending):
        neg[pending] = rng.integers(0, dataset.num_items, size=len(pending))
        clash = np.isin(users[pending] * dataset.num_items + neg[pending], train_codes)
        pending = pending[clash]

    batches = []
    for start in range(0, len(train), batch_size):
        stop = start + batch_size
        batches.append(TripleBatch(
            users=torch.from_numpy(users[start:stop].copy()),
            pos=torch.from_numpy(pos[start:stop].copy()),
            neg=torch.from_numpy(neg[start:stop].copy()),
        ))
    return batches


# Optimization

def build_optimizer(model: DamrsModel, learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=learning_rate, betas=(0.9, 0.999), eps=1e-8)


def optimizer_step(optimizer: torch.optim.Optimizer, epoch: int = 0, step: int = 0):
    """Adam step after backward(); a non-finite gradient aborts before any update"""
    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise DivergenceError(f"non-finite gradient at epoch {epoch}, step {step}")
    optimizer.step()


@dataclass
class TrainReport:
    variant: str
    epochs: List[Dict] = field(default_factory=list)
    initial_metric: float = 0.0
    best_epoch: int = 0
    best_metric: float = float("-inf")
    stop_epoch: int = 0
    stop_reason: str = ""
    val_metrics: Dict[str, float] = field(default_factory=dict)
    test_metrics: Dict[str, float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.epochs)

    def as_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "initial_metric": self.initial_metric,
            "best_epoch": self.best_epoch,
            "best_metric": self.best_metric,
            "stop_epoch": self.stop_epoch,
            "stop_reason": self.stop_reason,
            "val_metrics": self.val_metrics,
            "test_metrics": self.test_metrics,
        }


def _validation_score(model, dataset: InteractionDataset, config: TrainConfig) -> float:
    result = evaluate_split(model, dataset, "val", [config.validation_k])
    return result.metric(config.validation_metric, config.validation_k)


def _prepare_graphs(config: TrainConfig, graphs: Optional[Mapping[str, SparseItemGraph]]):
    spec = config.variant_spec()
    if not spec.use_item_graphs:
        return None
    if not graphs:
        raise PreconditionError(f"variant '{config.variant}' needs item graphs; run build-graphs first")
    return graphs


def train(
    dataset: InteractionDataset,
    features: Sequence[ModalityFeatures],
    graphs: Optional[Mapping[str, SparseItemGraph]],
    config: TrainConfig,
    loss_dump: Optional[Path] = None,
) -> Tuple[TrainReport, DamrsModel]:
    """Train with early stopping on the validation metric; returns the report and the best model"""
    graphs = _prepare_graphs(config, graphs)
    model = build_model(
        dataset, graphs,
        dim=config.dim,
        backbone=config.backbone,
        backbone_layers=config.backbone_layers,
        layers=config.layers,
        per_modality_tables=config.per_modality_tables,
        dtype=config.dtype,
        seed=config.seed,
    )
    spec = ObjectiveSpec.from_config(config)
    optimizer = build_optimizer(model, config.learning_rate)
    report = TrainReport(variant=config.variant)
    report.initial_metric = _validation_score(model, dataset, config)
    # the untrained state is the first best candidate
    report.best_metric = report.initial_metric
    report.best_epoch = 0
    logger.info(
        f"Training variant={config.variant} backbone={config.backbone} graphs={list(graphs or {})} "
        f"initial val {config.validation_metric}@{config.validation_k}={report.initial_metric:.4f}"
    )

    best_state = copy.deepcopy(model.state_dict())
    dump_rows = []
    wait = 0
    subset_rng = np.random.default_rng([config.seed, 1])
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        model.train()
        sums: Dict[str, float] = {}
        batches = sample_triples(dataset, config.batch_size, config.seed, epoch)
        for step, batch in enumerate(batches):
            item_subset = None
            if spec.align.sampled_items and spec.align.sampled_items < dataset.num_items:
                item_subset = torch.from_numpy(
                    np.sort(subset_rng.choice(dataset.num_items, size=spec.align.sampled_items, replace=False))
                )
            optimizer.zero_grad()
            breakdown = batch_objective(model(), batch, model.ego_tables(), spec, item_subset=item_subset)
            values = breakdown.as_floats()
            if not np.isfinite(values["total"]):
                report.stop_epoch = epoch
                report.stop_reason = "diverged"
                logger.error(f"Loss became non-finite at epoch {epoch}, step {step}: {values}")
                raise DivergenceError(f"non-finite loss at epoch {epoch}", report=report,
                                      last_finite_epoch=epoch - 1)
            breakdown.total.backward()
            try:
                optimizer_step(optimizer, epoch, step)
            except DivergenceError as e:
                report.stop_epoch = epoch
                report.stop_reason = "diverged"
                logger.error(str(e))
                raise DivergenceError(str(e), report=report, last_finite_epoch=epoch - 1)
            for name, value in values.items():
                sums[name] = sums.get(name, 0.0) + value
            if loss_dump is not None:
                dump_rows.append({"epoch": epoch, "step": step, **values})

        model.eval()
        metric = _validation_score(model, dataset, config)
        means = {name: value / len(batches) for name, value in sums.items()}
        elapsed = time.perf_counter() - started
        report.epochs.append({"epoch": epoch, **means, "val_metric": metric, "seconds": elapsed})
        logger.info(
            f"Epoch {epoch}: " + " ".join(f"{k}={v:.5f}" for k, v in means.items())
            + f" val={metric:.4f} ({elapsed:.1f}s)"
        )

        if metric > report.best_metric:
            report.best_metric = metric
            report.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            wait = 0
        else:
            wait += 1
        report.stop_epoch = epoch
        if wait >= config.patience:
            report.stop_reason = "early_stop"
            logger.info(f"Early stopping at epoch {epoch}; best epoch {report.best_epoch}")
            break
    else:
        report.stop_reason = "max_epochs"

    if loss_dump is not None:
        Path(loss_dump).parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(dump_rows).to_csv(loss_dump, index=False)

    model.load_state_dict(best_state)
    model.eval()
    report.val_metrics = evaluate_split(model, dataset, "val", config.eval_ks).as_dict()
    report.test_metrics = evaluate_split(
        model, dataset, "test", config.eval_ks, exclude_val=config.exclude_val_at_test
    ).as_dict()
    logger.info(f"Finished {config.variant}: test {report.test_metrics}")
    return report, model


# Gradient checking

def relative_error(exact: float, numeric: float, floor: float = GRAD_CHECK_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor)"""
    return abs(exact - numeric) / max(abs(exact), abs(numeric), floor)


def random_instance(num_users: int = 5, num_items: int = 8, seed: int = 0):
    """Small random dataset with two content modalities"""
    rng = np.random.default_rng(seed)
    pairs = []
    for user in range(num_users):
        size = int(rng.integers(2, max(3, num_items // 2)))
        pairs.extend((user, int(i)) for i in rng.choice(num_items, size=size, replace=False))
    train = np.array(pairs, dtype=np.int64)
    dataset = InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=train,
        val=np.empty((0, 2), dtype=np.int64),
        test=np.empty((0, 2), dtype=np.int64),
    )
    features = [
        ModalityFeatures("v", rng.normal(size=(num_items, 3)).astype(np.float32)),
        ModalityFeatures("t", rng.normal(size=(num_items, 3)).astype(np.float32)),
    ]
    return dataset, features


def _selector_spec(loss: str) -> ObjectiveSpec:
    spec = ObjectiveSpec(lambda_theta=1e-2, use_dbpr=loss != "bpr")
    spec.denoise = spec.denoise.model_copy(update={"stop_gradient_weights": loss == "dbpr-detached"})
    spec.align = spec.align.model_copy(update={"tau": 0.5, "k_align": 2, "lambda1": 0.5, "lambda2": 0.5})
    return spec


SELECTED_TERM: Dict[str, Callable[[LossBreakdown], torch.Tensor]] = {
    "bpr": lambda b: b.ranking + b.regularizer,
    "dbpr": lambda b: b.ranking + b.regularizer,
    "dbpr-detached": lambda b: b.ranking + b.regularizer,
    "au": lambda b: b.au,
    "ai-mm": lambda b: b.ai_mm,
    "ai-s": lambda b: b.ai_s,
    "total": lambda b: b.total,
}


def grad_check(
    loss: str = "total",
    num_users: int = 5,
    num_items: int = 8,
    dim: int = 4,
    seed: int = 0,
    step: float = GRAD_CHECK_STEP,
) -> float:
    """
    Max relative error between autograd and central differences over every
    parameter, in float64. Set selections and the contradiction gate are
    frozen at the unperturbed point. Errors use relative_error, whose floor
    turns entries with |gradient| < GRAD_CHECK_FLOOR into absolute checks.
    """
    if loss not in SELECTED_TERM:
        raise ValueError(f"Unknown loss '{loss}'; expected one of {LOSS_SELECTORS}")
    dataset, features = random_instance(num_users, num_items, seed)
    graphs, _ = build_item_graphs(dataset, features, GraphConfig(k=3, xi_b=1))
    model = build_model(dataset, graphs, dim=dim, backbone="lightgcn", backbone_layers=1,
                        layers=1, dtype="float64", seed=seed)
    batch = sample_triples(dataset, batch_size=len(dataset.train), seed=seed, epoch=0)[0]
    spec = _selector_spec(loss)
    term = SELECTED_TERM[loss]

    breakdown = batch_objective(model(), batch, model.ego_tables(), spec)
    frozen = breakdown.selections
    params = [p for _, p in sorted(model.named_parameters())]
    analytic = torch.autograd.grad(term(breakdown), params, allow_unused=True)

    def evaluate() -> float:
        with torch.no_grad():
            return float(term(batch_objective(model(), batch, model.ego_tables(), spec, selections=frozen)))

    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(params, analytic):
            grad = torch.zeros_like(param) if grad is None else grad
            flat, flat_grad = param.view(-1), grad.reshape(-1)
            for idx in range(flat.numel()):
                original = float(flat[idx])
                flat[idx] = original + step
                plus = evaluate()
                flat[idx] = original - step
                minus = evaluate()
                flat[idx] = original
                numeric = (plus - minus) / (2 * step)
                exact = float(flat_grad[idx])
                worst = max(worst, relative_error(exact, numeric))
    logger.info(f"grad-check loss={loss} seed={seed}: max relative error {worst:.3e}")
    return worst
