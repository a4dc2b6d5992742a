"""
config.py - Hyperparameter models, variant matrix and config-file parsing
Config files are plain `key = value` lines; unknown keys are errors.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, ParseError

logger = logging.getLogger(__name__)

MAX_TESTED_NOISE_RATIO = 0.2


# Pydantic models

class GraphConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(10, ge=1)
    xi_b: int = Field(2, ge=1)
    symmetrize: bool = True
    enable_mean_prune: bool = True
    enable_consistency_prune: bool = True
    build_behavior_graph: bool = True


class DenoiseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(1.5, gt=0)
    beta: float = Field(1.5, gt=0)
    gamma: float = Field(1.0, gt=0)
    f_override: Optional[float] = Field(None, gt=0, le=1)
    g_override: Optional[float] = Field(None, ge=0, lt=1)
    stop_gradient_weights: bool = False
    per_user_negatives: bool = False


class AlignConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau: float = Field(0.2, gt=0)
    k_align: int = Field(10, ge=1)
    lambda1: float = Field(0.1, ge=0)
    lambda2: float = Field(1e-3, ge=0)
    strategy: Literal["AI", "SP", "MP"] = "AI"
    sampled_items: int = Field(0, ge=0)


class NoiseSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["feature-replace", "feedback-add", "feedback-remove"]
    ratio: float
    target_modality: Optional[str] = None
    seed: int = 0
    allow_large_ratio: bool = False

    @model_validator(mode="after")
    def check_ratio(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"noise ratio {self.ratio} outside [0, 1]")
        if self.ratio > MAX_TESTED_NOISE_RATIO and not self.allow_large_ratio:
            raise ValueError(
                f"noise ratio {self.ratio} exceeds {MAX_TESTED_NOISE_RATIO}; pass allow_large_ratio to override"
            )
        if self.kind == "feature-replace" and not self.target_modality:
            raise ValueError("feature-replace noise needs a target_modality")
        return self


@dataclass(frozen=True)
class VariantSpec:
    """Which graphs and loss terms a named variant switches on"""
    name: str
    use_item_graphs: bool = True
    denoise_graphs: bool = True
    dbpr: bool = False
    align_user: bool = False
    align_item: bool = False
    strategy: str = "AI"
    drop_f: bool = False
    drop_g: bool = False


VARIANTS: Dict[str, VariantSpec] = {
    spec.name: spec for spec in (
        VariantSpec("backbone", use_item_graphs=False, denoise_graphs=False),
        VariantSpec("IIG", denoise_graphs=False),
        VariantSpec("DIIG"),
        VariantSpec("DIIG+D-BPR", dbpr=True),
        VariantSpec("DIIG+AU", align_user=True),
        VariantSpec("DIIG+AI", align_item=True),
        VariantSpec("DIIG+AUI", align_user=True, align_item=True),
        VariantSpec("DA-MRS-f", dbpr=True, align_user=True, align_item=True, drop_f=True),
        VariantSpec("DA-MRS-g", dbpr=True, align_user=True, align_item=True, drop_g=True),
        VariantSpec("DA-MRS", dbpr=True, align_user=True, align_item=True),
        VariantSpec("SP", align_item=True, strategy="SP"),
        VariantSpec("MP", align_item=True, strategy="MP"),
    )
}


class TrainConfig(BaseModel):
    """Every hyperparameter of a training run"""
    model_config = ConfigDict(extra="forbid")

    dim: int = Field(64, ge=1)
    batch_size: int = Field(4096, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    lambda_theta: float = Field(1e-4, ge=0)
    lambda1: float = Field(0.1, ge=0)
    lambda2: float = Field(1e-3, ge=0)
    alpha: float = Field(1.5, gt=0)
    beta: float = Field(1.5, gt=0)
    gamma: float = Field(1.0, gt=0)
    tau: float = Field(0.2, gt=0)
    k: int = Field(10, ge=1)
    xi_b: int = Field(2, ge=1)
    k_align: Optional[int] = Field(None, ge=1)
    layers: int = Field(2, ge=0)
    backbone: Literal["mf", "lightgcn"] = "lightgcn"
    backbone_layers: int = Field(2, ge=0)
    patience: int = Field(25, ge=1)
    max_epochs: int = Field(1000, ge=1)
    seed: int = 0
    variant: str = "DA-MRS"
    symmetrize: bool = True
    enable_mean_prune: Optional[bool] = None
    enable_consistency_prune: Optional[bool] = None
    stop_gradient_weights: bool = False
    per_user_negatives: bool = False
    sampled_items: int = Field(0, ge=0)
    per_modality_tables: bool = False
    validation_k: int = Field(20, ge=1)
    validation_metric: Literal["recall", "precision", "ndcg"] = "recall"
    eval_ks: List[int] = Field(default_factory=lambda: [10, 20])
    exclude_val_at_test: bool = True
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("eval_ks", mode="before")
    @classmethod
    def wrap_single_k(cls, value):
        if isinstance(value, int):
            return [value]
        return value

    @field_validator("variant")
    @classmethod
    def known_variant(cls, value):
        if value not in VARIANTS:
            raise ValueError(f"unknown variant '{value}'; expected one of {sorted(VARIANTS)}")
        return value

    def variant_spec(self) -> VariantSpec:
        return VARIANTS[self.variant]

    def graph_config(self) -> GraphConfig:
        denoise = self.variant_spec().denoise_graphs
        return GraphConfig(
            k=self.k,
            xi_b=self.xi_b,
            symmetrize=self.symmetrize,
            enable_mean_prune=denoise if self.enable_mean_prune is None else self.enable_mean_prune,
            enable_consistency_prune=(
                denoise if self.enable_consistency_prune is None else self.enable_consistency_prune
            ),
        )

    def denoise_config(self) -> DenoiseConfig:
        spec = self.variant_spec()
        return DenoiseConfig(
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            f_override=1.0 if spec.drop_f else None,
            g_override=0.0 if spec.drop_g else None,
            stop_gradient_weights=self.stop_gradient_weights,
            per_user_negatives=self.per_user_negatives,
        )

    def align_config(self) -> AlignConfig:
        spec = self.variant_spec()
        return AlignConfig(
            tau=self.tau,
            k_align=self.k_align or self.k,
            lambda1=self.lambda1 if spec.align_user else 0.0,
            lambda2=self.lambda2 if spec.align_item else 0.0,
            strategy=spec.strategy,
            sampled_items=self.sampled_items,
        )


class RuntimeSettings(BaseModel):
    threads: int = Field(1, ge=1)
    log_level: str = "INFO"
    log_dir: str = "logs"


def get_runtime_settings() -> RuntimeSettings:
    """Read runtime settings from the environment"""
    try:
        return RuntimeSettings(
            threads=int(os.getenv("DAMRS_THREADS", "1")),
            log_level=os.getenv("LOG_LEVEL", "INFO"),
            log_dir=os.getenv("DAMRS_LOG_DIR", "logs"),
        )
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"Invalid runtime environment: {e}")


# Config-file parsing

Scalar = Union[bool, int, float, str]


def parse_value(raw: str) -> Union[Scalar, List[Scalar]]:
    """Parse a config value: bool, int, float, comma list or string"""
    raw = raw.strip()
    if "," in raw:
        return [parse_value(part) for part in raw.split(",") if part.strip()]
    lowered = raw.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null"):
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_key_value_file(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    values: Dict[str, Any] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ParseError("expected 'key = value'", path=str(path), line_number=line_number)
            key, raw = stripped.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError("empty key", path=str(path), line_number=line_number)
            if key in values:
                raise ParseError(f"duplicate key '{key}'", path=str(path), line_number=line_number)
            values[key] = parse_value(raw)
    return values


def build_train_config(values: Dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first.get("loc", ())) or "<config>"
        raise ConfigError(f"Invalid config key '{key}': {first.get('msg')}")


def load_config_file(path) -> TrainConfig:
    """Load a TrainConfig from a key = value file"""
    config = build_train_config(parse_key_value_file(path))
    logger.info(f"Loaded config from {path}: variant={config.variant}, backbone={config.backbone}")
    return config


def make_noise_spec(**values) -> NoiseSpec:
    try:
        return NoiseSpec(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid noise spec: {e.errors()[0].get('msg')}")


@dataclass
class GridSpec:
    base: Dict[str, Any]
    axes: Dict[str, List[Any]]
    variants: List[str]
    seeds: List[int]


def load_grid_file(path) -> GridSpec:
    """Load an ablation grid: list-valued keys become sweep axes"""
    values = parse_key_value_file(path)
    variants = values.pop("variants", list(VARIANTS))
    seeds = values.pop("seeds", None)
    if not isinstance(variants, list):
        variants = [variants]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"Unknown variants in grid {path}: {unknown}")
    if seeds is not None and not isinstance(seeds, list):
        seeds = [seeds]

    base, axes = {}, {}
    for key, value in values.items():
        if key not in TrainConfig.model_fields:
            raise ConfigError(f"Unknown grid key '{key}' in {path}")
        if isinstance(value, list) and key != "eval_ks":
            axes[key] = value
        else:
            base[key] = value
    # validate the base once so typos surface before any cell runs
    build_train_config(dict(base, **{k: v[0] for k, v in axes.items()}))
    return GridSpec(base=base, axes=axes, variants=list(variants), seeds=list(seeds or []))
