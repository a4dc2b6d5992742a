"""
test_experiments.py - Grid cells, aggregation and small end-to-end matrices
"""

import json
import math

import pandas as pd
import pytest

from damrs.config import VARIANTS, GridSpec
from damrs.dataset import save_dataset
from damrs.errors import ConfigError
from damrs.preparation import make_planted_dataset
from damrs.experiments import (
    ROBUSTNESS_RATIOS, Cell, ablation_cells, comparison_table, robustness_cells, robustness_curves, run_cell,
    run_grid,
)

FAST = {"dim": 8, "batch_size": 256, "max_epochs": 2, "k": 5, "eval_ks": [5, 10]}


class TestCells:
    """Test how grids expand into cells"""

    def test_ablation_nesting(self):
        grid = GridSpec(base={"dim": 8}, axes={"lambda1": [0.1, 1.0], "k": [5, 10]},
                        variants=["DIIG", "DA-MRS"], seeds=[0, 1])
        cells = ablation_cells(grid)
        assert len(cells) == 2 * 4 * 2
        assert len({c.name for c in cells}) == len(cells)
        assert cells[0].variant == "DIIG"
        assert cells[0].overrides == {"dim": 8, "k": 5, "lambda1": 0.1}
        assert [c.seed for c in cells[:2]] == [0, 1]
        assert cells[-1].name == "DA-MRS__k=10_lambda1=1.0__seed=1"

    def test_robustness(self):
        cells = robustness_cells(["IIG", "DA-MRS"], "feedback-add", [0, 1])
        assert len(cells) == 2 * len(ROBUSTNESS_RATIOS) * 2
        clean = [c for c in cells if c.noise is None]
        assert len(clean) == 4
        noisy = next(c for c in cells if c.noise is not None)
        assert noisy.noise["kind"] == "feedback-add"
        assert noisy.noise["seed"] == noisy.seed

    def test_robustness_ratio_outside_tested_range(self):
        with pytest.raises(ConfigError, match="0.3"):
            robustness_cells(["DIIG"], "feedback-add", [0], ratios=(0.0, 0.3))


class TestAggregation:
    """Test seed averaging and robustness curves"""

    def test_relative_drop(self):
        rows = pd.DataFrame([
            {"variant": "IIG", "seed": 0, "ratio": 0.0, "recall@20": 0.5},
            {"variant": "IIG", "seed": 1, "ratio": 0.0, "recall@20": 0.3},
            {"variant": "IIG", "seed": 0, "ratio": 0.1, "recall@20": 0.3},
            {"variant": "IIG", "seed": 1, "ratio": 0.1, "recall@20": 0.3},
        ])
        curves = robustness_curves(rows).set_index("ratio")
        assert curves.loc[0.0, "recall@20"] == pytest.approx(0.4)
        assert curves.loc[0.1, "relative_drop"] == pytest.approx(0.25)
        assert curves.loc[0.0, "seeds"] == 2

    def test_comparison_table(self):
        rows = pd.DataFrame([
            {"cell": "a", "variant": "DIIG", "seed": 0, "best_epoch": 3, "recall@20": 0.2},
            {"cell": "b", "variant": "DIIG", "seed": 1, "best_epoch": 4, "recall@20": 0.4},
            {"cell": "c", "variant": "DA-MRS", "seed": 0, "best_epoch": 2, "recall@20": 0.5},
        ])
        table = comparison_table(rows, ["recall@20"])
        assert table["variant"].tolist() == ["DIIG", "DA-MRS"]
        assert table["recall@20"].tolist() == pytest.approx([0.3, 0.5])


class TestRunCells:
    """Test cell execution against a dataset directory"""

    def test_run_cell_outputs(self, planted_dir, tmp_path):
        cell = Cell(name="DIIG__seed=0", variant="DIIG", seed=0, overrides=dict(FAST))
        row = run_cell(cell, planted_dir, tmp_path / "cells")
        out = tmp_path / "cells" / "DIIG__seed=0"
        for name in ("checkpoint/checkpoint.json", "epochs.csv", "report.json", "run_manifest.json"):
            assert (out / name).exists()
        assert row["variant"] == "DIIG"
        assert row["eval_ks"] == "5,10"
        assert "recall@10" in row
        manifest = json.loads((out / "run_manifest.json").read_text(encoding="utf-8"))
        assert set(manifest["stage_timings"]) >= {"load", "build_graphs", "train"}

    def test_noisy_cell(self, planted_dir, tmp_path):
        noise = {"kind": "feature-replace", "ratio": 0.1, "target_modality": "v", "seed": 0}
        cell = Cell(name="noisy", variant="DA-MRS", seed=0, overrides=dict(FAST), noise=noise)
        row = run_cell(cell, planted_dir, tmp_path / "cells")
        assert row["noise_kind"] == "feature-replace"
        assert row["ratio"] == 0.1

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_every_variant_trains_from_config(self, variant, planted_dir, tmp_path):
        cell = Cell(name=f"{variant.replace('+', 'plus')}__seed=0", variant=variant, seed=0, overrides=dict(FAST))
        row = run_cell(cell, planted_dir, tmp_path / "cells")
        assert row["variant"] == variant
        metrics = [key for key in row if key.split("@")[0] in ("recall", "precision", "ndcg")]
        assert len(metrics) == 6
        for key in metrics:
            assert math.isfinite(row[key]) and 0.0 <= row[key] <= 1.0

    def test_run_grid_keeps_cell_order(self, planted_dir, tmp_path):
        cells = [Cell(name=f"backbone__seed={s}", variant="backbone", seed=s, overrides=dict(FAST)) for s in (1, 0)]
        rows = run_grid(cells, planted_dir, tmp_path / "cells")
        assert rows["seed"].tolist() == [1, 0]


@pytest.mark.slow
class TestMatrices:
    """Small end-to-end ablation and robustness matrices"""

    def test_ablation_matrix(self, planted_dir, tmp_path):
        grid = GridSpec(base=dict(FAST, max_epochs=5), axes={}, variants=["backbone", "IIG", "DIIG", "DA-MRS"],
                        seeds=[0, 1])
        rows = run_grid(ablation_cells(grid), planted_dir, tmp_path / "cells")
        table = comparison_table(rows, ["recall@10", "ndcg@10"])
        assert table["variant"].tolist() == ["backbone", "IIG", "DIIG", "DA-MRS"]
        assert table["recall@10"].between(0, 1).all()

    def test_robustness_matrix(self, planted_dir, tmp_path):
        cells = robustness_cells(["IIG", "DA-MRS"], "feedback-remove", [0], ratios=(0.0, 0.1),
                                 overrides=dict(FAST, max_epochs=5))
        rows = run_grid(cells, planted_dir, tmp_path / "cells")
        curves = robustness_curves(rows, "recall@10")
        assert len(curves) == 4
        clean = curves.loc[curves["ratio"] == 0.0, "relative_drop"]
        assert (clean == 0).all()

    def test_denoising_holds_up_under_feature_noise(self, tmp_path):
        dataset, features = make_planted_dataset(num_users=500, num_items=200, dims=(32, 16), seed=7)
        data_dir = save_dataset(dataset, features, tmp_path / "data")
        overrides = {"dim": 32, "batch_size": 512, "max_epochs": 40, "patience": 10, "learning_rate": 0.01,
                     "eval_ks": [20]}
        cells = robustness_cells(["IIG", "DIIG", "DA-MRS"], "feature-replace", range(5), ratios=(0.0, 0.2),
                                 modality="v", overrides=overrides)
        rows = run_grid(cells, data_dir, tmp_path / "cells")
        curves = robustness_curves(rows, "recall@20").set_index(["variant", "ratio"])
        assert curves.loc[("DIIG", 0.2), "recall@20"] >= curves.loc[("IIG", 0.2), "recall@20"]
        assert curves.loc[("DA-MRS", 0.2), "relative_drop"] < curves.loc[("IIG", 0.2), "relative_drop"]
