"""
experiments.py - Grid cells for the ablation and robustness matrices
Each cell trains one (variant, seed, overrides, noise) combination in its own
directory. Cells run serially or in a process pool capped by DAMRS_THREADS;
results are gathered in cell order.
"""

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from .config import GridSpec, build_train_config, get_runtime_settings, make_noise_spec
from .dataset import InteractionDataset, ModalityFeatures, load_dataset_dir
from .graphs import SparseItemGraph, build_item_graphs
from .model import save_checkpoint
from .noise import apply_noise
from .training import train
from .storage import write_sidecar
from .utils.manifest import RunManifest

logger = logging.getLogger(__name__)

ROBUSTNESS_RATIOS = (0.0, 0.05, 0.10, 0.15, 0.20)
HEADLINE_METRIC = "recall@20"

_DATA_CACHE: Dict[Tuple, Tuple[InteractionDataset, List[ModalityFeatures]]] = {}
_GRAPH_CACHE: Dict[Tuple, Dict[str, SparseItemGraph]] = {}


@dataclass
class Cell:
    name: str
    variant: str
    seed: int
    overrides: Dict[str, Any] = field(default_factory=dict)
    noise: Optional[Dict[str, Any]] = None


def _cell_inputs(data_dir: str, noise: Optional[Dict[str, Any]]):
    key = (data_dir, json.dumps(noise, sort_keys=True))
    if key not in _DATA_CACHE:
        dataset, features, _ = load_dataset_dir(data_dir)
        if noise is not None:
            dataset, features, _ = apply_noise(dataset, features, make_noise_spec(**noise))
        _DATA_CACHE[key] = (dataset, features)
    return _DATA_CACHE[key]


def run_cell(cell: Cell, data_dir, out_root) -> Dict[str, Any]:
    """Train and evaluate one grid cell; writes report, checkpoint and manifest under out_root/name"""
    torch.set_num_threads(1)
    data_dir = str(data_dir)
    out_dir = Path(out_root) / cell.name
    config = build_train_config(dict(cell.overrides, variant=cell.variant, seed=cell.seed))
    manifest = RunManifest(command="cell", config=config.model_dump(), seeds=[cell.seed])

    with manifest.stage("load"):
        dataset, features = _cell_inputs(data_dir, cell.noise)
    graphs = None
    if config.variant_spec().use_item_graphs:
        graph_config = config.graph_config()
        key = (data_dir, json.dumps(cell.noise, sort_keys=True), graph_config.model_dump_json())
        with manifest.stage("build_graphs"):
            if key not in _GRAPH_CACHE:
                _GRAPH_CACHE[key], _ = build_item_graphs(dataset, features, graph_config)
        graphs = _GRAPH_CACHE[key]

    with manifest.stage("train"):
        report, model = train(dataset, features, graphs, config)

    save_checkpoint(model, out_dir / "checkpoint", {"variant": config.variant, "best_epoch": report.best_epoch})
    report.to_frame().to_csv(out_dir / "epochs.csv", index=False)
    write_sidecar(out_dir / "report.json", report.as_dict())
    manifest.outputs = [str(out_dir)]
    manifest.write(out_dir)

    row = {"cell": cell.name, "variant": cell.variant, "seed": cell.seed}
    row.update({k: ",".join(map(str, v)) if isinstance(v, list) else v for k, v in cell.overrides.items()})
    if cell.noise is not None:
        row.update(noise_kind=cell.noise["kind"], ratio=cell.noise["ratio"])
    row.update(best_epoch=report.best_epoch, **report.test_metrics)
    return row


def _run_cell_args(args):
    return run_cell(*args)


def run_grid(cells: Sequence[Cell], data_dir, out_root, workers: Optional[int] = None) -> pd.DataFrame:
    """Run cells (in parallel up to DAMRS_THREADS) and merge rows in cell order"""
    cap = get_runtime_settings().threads
    workers = max(1, min(workers or cap, cap, len(cells) or 1))
    args = [(cell, str(data_dir), str(out_root)) for cell in cells]
    logger.info(f"Running {len(cells)} cells with {workers} worker(s)")
    if workers == 1:
        rows = [_run_cell_args(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_args, args))
    return pd.DataFrame(rows)


def ablation_cells(grid: GridSpec) -> List[Cell]:
    """variants x sweep axes x seeds, in that nesting order"""
    axis_names = sorted(grid.axes)
    cells = []
    for variant in grid.variants:
        for values in itertools.product(*(grid.axes[name] for name in axis_names)):
            overrides = dict(grid.base, **dict(zip(axis_names, values)))
            suffix = "_".join(f"{k}={v}" for k, v in zip(axis_names, values))
            for seed in grid.seeds:
                name = "__".join(filter(None, [_safe(variant), suffix, f"seed={seed}"]))
                cells.append(Cell(name=name, variant=variant, seed=seed, overrides=overrides))
    return cells


def robustness_cells(
    variants: Sequence[str],
    kind: str,
    seeds: Sequence[int],
    ratios: Sequence[float] = ROBUSTNESS_RATIOS,
    modality: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> List[Cell]:
    cells = []
    for variant in variants:
        for ratio in ratios:
            for seed in seeds:
                noise = None
                if ratio > 0:
                    noise = make_noise_spec(kind=kind, ratio=ratio, target_modality=modality, seed=seed).model_dump()
                name = f"{_safe(variant)}__{kind}={ratio:.2f}__seed={seed}"
                cells.append(Cell(name=name, variant=variant, seed=seed, overrides=dict(overrides or {}),
                                  noise=noise))
    return cells


def _safe(name: str) -> str:
    return name.replace("+", "plus").replace("/", "_")


def robustness_curves(rows: pd.DataFrame, metric: str = HEADLINE_METRIC) -> pd.DataFrame:
    """Seed-averaged metric per (variant, ratio) and its relative drop from ratio 0"""
    frame = rows.copy()
    if "ratio" not in frame:
        frame["ratio"] = 0.0
    frame["ratio"] = frame["ratio"].fillna(0.0)
    curves = (
        frame.groupby(["variant", "ratio"], sort=False)[metric]
        .agg(["mean", "std", "count"])
        .reset_index()
        .rename(columns={"mean": metric, "std": f"{metric}_std", "count": "seeds"})
    )
    clean = curves.loc[curves["ratio"] == 0.0].set_index("variant")[metric]
    base = curves["variant"].map(clean)
    curves["relative_drop"] = (base - curves[metric]) / base.where(base > 0)
    return curves.sort_values(["variant", "ratio"], kind="stable").reset_index(drop=True)


def comparison_table(rows: pd.DataFrame, metrics: Sequence[str]) -> pd.DataFrame:
    """Seed-averaged metrics per variant (and sweep values), in first-seen order"""
    keys = [c for c in rows.columns if c not in set(metrics) | {"cell", "seed", "best_epoch"}]
    present = [m for m in metrics if m in rows]
    return rows.groupby(keys, sort=False, dropna=False)[present].mean().reset_index()
