"""
cli.py - Subcommands of the damrs pipeline
Every artifact-producing command writes a run manifest next to its outputs.
Reports are CSV plus an aligned plain-text rendering of the same table.
"""

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .config import (
    MAX_TESTED_NOISE_RATIO, VARIANTS, TrainConfig, build_train_config, load_grid_file, make_noise_spec,
    parse_key_value_file, parse_value,
)
from .dataset import dataset_stats, load_dataset, load_dataset_dir, save_dataset
from .errors import ConfigError, ContractError, PreconditionError, UsageError
from .evaluation import evaluate_split
from .experiments import (
    HEADLINE_METRIC, ROBUSTNESS_RATIOS, ablation_cells, comparison_table, robustness_cells,
    robustness_curves, run_grid,
)
from .graphs import build_item_graphs, load_graphs, save_graphs
from .model import load_checkpoint, save_checkpoint
from .noise import apply_noise
from .preparation import make_planted_dataset, prepare_raw
from .storage import read_matrix, write_sidecar
from .training import GRAD_CHECK_TOLERANCE, LOSS_SELECTORS, grad_check, train
from .utils.manifest import RunManifest

logger = logging.getLogger(__name__)


def write_report(frame: pd.DataFrame, out_dir, stem: str) -> Path:
    """CSV plus aligned text; the text version is also printed"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / f"{stem}.csv", index=False)
    text = frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")
    (out_dir / f"{stem}.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return out_dir / f"{stem}.csv"


def _int_list(raw: str) -> List[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{raw}'")


def _float_list(raw: str) -> List[float]:
    try:
        return [float(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{raw}'")


def _named_paths(entries: Optional[List[str]]) -> Dict[str, Path]:
    paths = {}
    for entry in entries or []:
        if "=" not in entry:
            raise UsageError(f"expected MODALITY=PATH, got '{entry}'")
        name, path = entry.split("=", 1)
        paths[name.strip()] = Path(path.strip())
    return paths


def _train_config(config_path: Optional[str], overrides: Optional[List[str]] = None) -> TrainConfig:
    values = parse_key_value_file(config_path) if config_path else {}
    for entry in overrides or []:
        if "=" not in entry:
            raise UsageError(f"expected KEY=VALUE, got '{entry}'")
        key, raw = entry.split("=", 1)
        values[key.strip()] = parse_value(raw)
    return build_train_config(values)


# prepare / stats

def cmd_prepare(args) -> int:
    manifest = RunManifest(command="prepare", seeds=[args.seed])
    with manifest.stage("prepare"):
        if args.synthetic:
            dataset, features = make_planted_dataset(
                num_users=args.users, num_items=args.items, num_blocks=args.blocks, seed=args.seed,
            )
            manifest.config = {"synthetic": True, "users": args.users, "items": args.items, "blocks": args.blocks}
        elif args.interactions:
            frame = pd.read_csv(args.interactions, sep="\t", header=None, names=["user", "item"], dtype=str,
                                usecols=[0, 1])
            raw_features = {m: read_matrix(p) for m, p in _named_paths(args.features).items()}
            raw_item_ids = None
            if args.item_catalog:
                raw_item_ids = [line.strip() for line in open(args.item_catalog, encoding="utf-8") if line.strip()]
            dataset, features = prepare_raw(frame, raw_features, raw_item_ids, core=args.core, seed=args.seed)
            manifest.add_input("interactions", args.interactions)
            manifest.config = {"core": args.core}
        elif args.train:
            if not (args.val and args.test):
                raise UsageError("--train needs --val and --test")
            dataset, features = load_dataset(args.train, args.val, args.test, _named_paths(args.features),
                                             item_catalog_path=args.item_catalog)
            manifest.add_input("train", args.train)
        else:
            raise UsageError("prepare needs --synthetic, --interactions or --train/--val/--test")
        save_dataset(dataset, features, args.out)
    manifest.outputs = [str(args.out)]
    manifest.write(args.out)
    return 0


def cmd_stats(args) -> int:
    dataset, features, _ = load_dataset_dir(args.data)
    stats = dataset_stats(dataset, features)
    write_report(stats, args.out or args.data, "dataset_stats")
    return 0


# graphs / noise

def cmd_build_graphs(args) -> int:
    config = _train_config(args.config)
    graph_config = config.graph_config()
    manifest = RunManifest(command="build-graphs", config=graph_config.model_dump())
    manifest.add_input("data", args.input)
    with manifest.stage("load"):
        dataset, features, _ = load_dataset_dir(args.input)
    with manifest.stage("build"):
        graphs, stats = build_item_graphs(dataset, features, graph_config)
    save_graphs(graphs, args.out, graph_config, stats)
    print(stats.to_string(index=False))
    manifest.outputs = [str(args.out)]
    manifest.write(args.out)
    return 0


def cmd_inject_noise(args) -> int:
    spec = make_noise_spec(
        kind=args.kind, ratio=args.ratio, target_modality=args.modality, seed=args.seed,
        allow_large_ratio=args.allow_large_ratio,
    )
    manifest = RunManifest(command="inject-noise", config=spec.model_dump(), seeds=[spec.seed])
    manifest.add_input("data", args.input)
    dataset, features, sidecar = load_dataset_dir(args.input)
    with manifest.stage("inject"):
        dataset, features, record = apply_noise(dataset, features, spec)
    save_dataset(dataset, features, args.out, provenance=list(sidecar.get("noise", [])) + [record])
    logger.info(f"Injected {record['kind']} noise: {record['affected']} affected")
    manifest.outputs = [str(args.out)]
    manifest.write(args.out)
    return 0


# train / evaluate

def _check_graph_flags(config: TrainConfig, sidecar: Dict, force: bool = False):
    """Pruning flags must match the variant; other graph settings only warn"""
    expected = config.graph_config().model_dump()
    built = sidecar.get("config", {})
    mismatched = [k for k in ("k", "xi_b", "symmetrize", "enable_mean_prune", "enable_consistency_prune")
                  if k in built and built[k] != expected[k]]
    for key in mismatched:
        message = (
            f"Graphs were built with {key}={built[key]} but variant '{config.variant}' expects {expected[key]}"
        )
        if key.startswith("enable_") and not force:
            raise PreconditionError(f"{message}; rebuild the graphs or pass --force")
        logger.warning(message)


def cmd_train(args) -> int:
    config = _train_config(args.config, args.set)
    manifest = RunManifest(command="train", config=config.model_dump(), seeds=[config.seed])
    manifest.add_input("data", args.data)
    dataset, features, _ = load_dataset_dir(args.data)

    graphs = None
    if config.variant_spec().use_item_graphs:
        if not args.graphs:
            raise PreconditionError(f"variant '{config.variant}' needs --graphs (run build-graphs first)")
        graphs, sidecar = load_graphs(args.graphs, dataset.num_items)
        _check_graph_flags(config, sidecar, force=args.force)
        manifest.add_input("graphs", args.graphs)

    with manifest.stage("train"):
        report, model = train(dataset, features, graphs, config, loss_dump=args.loss_dump)
    out = Path(args.out)
    save_checkpoint(model, out, {"variant": config.variant, "best_epoch": report.best_epoch,
                                 "step_count": report.stop_epoch})
    report.to_frame().to_csv(out / "epochs.csv", index=False)
    write_sidecar(out / "report.json", report.as_dict())
    metrics = pd.DataFrame([{"split": "test", **report.test_metrics}])
    write_report(metrics, out, "test_metrics")
    manifest.outputs = [str(out)]
    manifest.write(out)
    return 0


def cmd_evaluate(args) -> int:
    tables, metadata = load_checkpoint(args.checkpoint)
    dataset, _, _ = load_dataset_dir(args.data)
    if (metadata["num_users"], metadata["num_items"]) != (dataset.num_users, dataset.num_items):
        raise PreconditionError(
            f"checkpoint covers {metadata['num_users']}x{metadata['num_items']}, "
            f"data has {dataset.num_users}x{dataset.num_items}"
        )
    result = evaluate_split(tables, dataset, args.split, args.k, exclude_val=not args.keep_val_items)
    out = Path(args.out or args.checkpoint)
    write_report(result.summary, out, f"{args.split}_metrics")
    if args.per_user:
        result.per_user.to_csv(out / f"{args.split}_per_user.csv", index=False)
    return 0


# experiment matrices

def _seeds(raw: Optional[List[int]], fallback: Optional[List[int]] = None) -> List[int]:
    seeds = raw or fallback
    if not seeds:
        raise UsageError("explicit --seeds are required for reproducible experiment matrices")
    return seeds


def _metric_columns(rows: pd.DataFrame) -> List[str]:
    return [c for c in rows.columns if "@" in c]


def cmd_ablate(args) -> int:
    grid = load_grid_file(args.grid)
    grid.seeds = _seeds(args.seeds, grid.seeds)
    cells = ablation_cells(grid)
    manifest = RunManifest(command="ablate", config={"base": grid.base, "axes": grid.axes,
                                                      "variants": grid.variants}, seeds=grid.seeds)
    manifest.add_input("data", args.data)
    manifest.add_input("grid", args.grid)
    with manifest.stage("grid"):
        rows = run_grid(cells, args.data, Path(args.out) / "cells", workers=args.workers)
    rows.to_csv(Path(args.out) / "cells.csv", index=False)
    write_report(comparison_table(rows, _metric_columns(rows)), args.out, "comparison")
    manifest.outputs = [str(args.out)]
    manifest.write(args.out)
    return 0


def cmd_robustness(args) -> int:
    seeds = _seeds(args.seeds)
    bad = [r for r in args.ratios if not 0.0 <= r <= MAX_TESTED_NOISE_RATIO]
    if bad:
        raise ConfigError(f"robustness ratios must lie in [0, {MAX_TESTED_NOISE_RATIO}], got {bad}")
    overrides = parse_key_value_file(args.config) if args.config else {}
    for name in args.variants:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant '{name}'")
    modality = args.modality
    if args.kind == "feature-replace" and modality is None:
        _, features, _ = load_dataset_dir(args.data)
        if not features:
            raise PreconditionError("feature-replace noise needs at least one modality")
        modality = features[0].modality_id
    cells = robustness_cells(args.variants, args.kind, seeds, args.ratios, modality, overrides)
    manifest = RunManifest(command="robustness", config={"kind": args.kind, "ratios": args.ratios,
                                                          "variants": args.variants, **overrides}, seeds=seeds)
    manifest.add_input("data", args.data)
    with manifest.stage("grid"):
        rows = run_grid(cells, args.data, Path(args.out) / "cells", workers=args.workers)
    rows.to_csv(Path(args.out) / "cells.csv", index=False)
    write_report(robustness_curves(rows, args.metric), args.out, "curves")
    manifest.outputs = [str(args.out)]
    manifest.write(args.out)
    return 0


def cmd_grad_check(args) -> int:
    losses = list(LOSS_SELECTORS) if args.loss == "all" else [args.loss]
    rows = []
    for loss in losses:
        errors = [grad_check(loss, args.users, args.items, args.dim, seed) for seed in range(args.seeds)]
        rows.append({"loss": loss, "seeds": args.seeds, "max_relative_error": float(np.max(errors))})
    frame = pd.DataFrame(rows)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.3e}"))
    failed = frame.loc[frame["max_relative_error"] > GRAD_CHECK_TOLERANCE, "loss"].tolist()
    if failed:
        raise ContractError(f"gradient check failed for {failed} (tolerance {GRAD_CHECK_TOLERANCE})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damrs", description="Denoised and aligned multi-modal recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="Write a validated dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", action="store_true", help="Generate a planted-block dataset")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--interactions", help="Raw user<TAB>item file to k-core filter and split 8:1:1")
    p.add_argument("--core", type=int, default=5)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--test")
    p.add_argument("--item-catalog", help="Item IDs, one per line, in feature-row order")
    p.add_argument("--features", action="append", metavar="MODALITY=PATH")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("stats", help="Print dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("build-graphs", help="Build semantic and behavior item graphs")
    p.add_argument("--config")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("inject-noise", help="Write a noisy copy of a dataset directory")
    p.add_argument("--kind", required=True, choices=["feature-replace", "feedback-add", "feedback-remove"])
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--modality")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--allow-large-ratio", action="store_true")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("train", help="Train one variant with early stopping")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key")
    p.add_argument("--data", required=True)
    p.add_argument("--graphs")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-dump", help="CSV of per-step loss components")
    p.add_argument("--force", action="store_true", help="Train on graphs whose pruning flags differ from the variant")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Full-ranking metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=_int_list, default=[10, 20])
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.add_argument("--keep-val-items", action="store_true", help="Do not exclude val items at test time")
    p.add_argument("--per-user", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="Run the variant matrix of a grid file")
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robustness", help="Metric-versus-noise-ratio curves")
    p.add_argument("--kind", required=True, choices=["feature-replace", "feedback-add", "feedback-remove"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--variants", type=lambda raw: [v.strip() for v in raw.split(",") if v.strip()],
                   default=["IIG", "DA-MRS"])
    p.add_argument("--ratios", type=_float_list, default=list(ROBUSTNESS_RATIOS))
    p.add_argument("--modality")
    p.add_argument("--config", help="key = value overrides applied to every cell")
    p.add_argument("--metric", default=HEADLINE_METRIC)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("grad-check", help="Autograd versus central differences")
    p.add_argument("--loss", choices=[*LOSS_SELECTORS, "all"], default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--users", type=int, default=5)
    p.add_argument("--items", type=int, default=8)
    p.add_argument("--dim", type=int, default=4)
    p.set_defaults(func=cmd_grad_check)

    return parser
