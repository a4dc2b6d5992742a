"""
test_training.py - Triple sampling, optimizer steps, the training loop and gradient checks
"""

import numpy as np
import pytest
import torch
import torch.nn as nn

from damrs import training
from damrs.config import TrainConfig
from damrs.errors import DivergenceError, PreconditionError
from damrs.graphs import build_item_graphs
from damrs.model import build_model
from damrs.training import (
    GRAD_CHECK_FLOOR, GRAD_CHECK_TOLERANCE, LOSS_SELECTORS, build_optimizer, grad_check, optimizer_step,
    relative_error, sample_triples, train,
)
from damrs.tests.conftest import make_dataset


def _holder(value):
    holder = nn.Module()
    holder.weight = nn.Parameter(torch.tensor([value], dtype=torch.float64))
    return holder


class TestSampling:
    """Test triple sampling"""

    def test_negative_from_complement(self):
        dataset = make_dataset(1, 3, [(0, 1)])
        for epoch in range(20):
            batch = sample_triples(dataset, batch_size=8, seed=0, epoch=epoch)[0]
            assert int(batch.pos[0]) == 1
            assert int(batch.neg[0]) in (0, 2)

    def test_one_triple_per_pair(self, planted):
        dataset, _ = planted
        batches = sample_triples(dataset, batch_size=100, seed=0, epoch=1)
        assert sum(len(b) for b in batches) == len(dataset.train)
        assert max(len(b) for b in batches) == 100
        users = torch.cat([b.users for b in batches]).numpy()
        neg = torch.cat([b.neg for b in batches]).numpy()
        train_codes = set((dataset.train[:, 0] * dataset.num_items + dataset.train[:, 1]).tolist())
        assert not set((users * dataset.num_items + neg).tolist()) & train_codes

    def test_deterministic(self, planted):
        dataset, _ = planted
        first = sample_triples(dataset, 64, seed=3, epoch=2)
        second = sample_triples(dataset, 64, seed=3, epoch=2)
        other = sample_triples(dataset, 64, seed=3, epoch=3)
        assert all(torch.equal(a.neg, b.neg) and torch.equal(a.users, b.users) for a, b in zip(first, second))
        assert not torch.equal(first[0].users, other[0].users)

    def test_negatives_are_uniform(self):
        num_users, num_items = 50000, 100
        train = [(u, i) for u in range(num_users) for i in (0, 1)]
        dataset = make_dataset(num_users, num_items, train)
        neg = sample_triples(dataset, batch_size=len(train), seed=0, epoch=0)[0].neg.numpy()
        counts = np.bincount(neg, minlength=num_items)[2:]
        assert counts.sum() == 100000
        expected = counts.sum() / len(counts)
        chi_square = float(((counts - expected) ** 2 / expected).sum())
        assert chi_square < 167

    def test_empty_train(self):
        with pytest.raises(PreconditionError):
            sample_triples(make_dataset(1, 3, []), 8, 0, 0)

    def test_user_with_every_item(self):
        with pytest.raises(PreconditionError):
            sample_triples(make_dataset(1, 2, [(0, 0), (0, 1)]), 8, 0, 0)


class TestOptimizerStep:
    """Test Adam steps and the non-finite gradient guard"""

    def test_zero_gradient_keeps_parameters(self):
        holder = _holder(0.7)
        optimizer = build_optimizer(holder, 0.1)
        holder.weight.grad = torch.zeros(1, dtype=torch.float64)
        optimizer_step(optimizer)
        assert float(holder.weight) == 0.7

    def test_first_step_size(self):
        holder = _holder(0.0)
        optimizer = build_optimizer(holder, 0.1)
        holder.weight.grad = torch.ones(1, dtype=torch.float64)
        optimizer_step(optimizer)
        assert float(holder.weight) == pytest.approx(-0.1, rel=1e-6)

    def test_non_finite_gradient(self):
        holder = _holder(0.5)
        optimizer = build_optimizer(holder, 0.1)
        holder.weight.grad = torch.tensor([float("nan")], dtype=torch.float64)
        with pytest.raises(DivergenceError):
            optimizer_step(optimizer, epoch=3, step=1)
        assert float(holder.weight) == 0.5


def _small_config(**overrides):
    values = dict(dim=16, batch_size=128, learning_rate=0.01, max_epochs=3, patience=5, k=5,
                  validation_k=5, eval_ks=[5, 10], seed=0)
    values.update(overrides)
    return TrainConfig(**values)


class TestTrain:
    """Test the training loop"""

    def test_learns_planted_blocks(self, planted):
        dataset, features = planted
        config = _small_config(variant="DA-MRS", max_epochs=30, patience=10)
        graphs, _ = build_item_graphs(dataset, features, config.graph_config())
        report, model = train(dataset, features, graphs, config)
        assert report.best_metric > report.initial_metric
        assert report.best_epoch >= 1
        assert set(report.test_metrics) == {f"{m}@{k}" for m in ("recall", "precision", "ndcg") for k in (5, 10)}
        assert list(report.to_frame().columns[:2]) == ["epoch", "ranking"]

    def test_same_seed_same_model(self, planted):
        dataset, features = planted
        config = _small_config(variant="backbone", backbone="mf")
        _, first = train(dataset, features, None, config)
        _, second = train(dataset, features, None, config)
        for name, value in first.state_dict().items():
            assert torch.equal(value, second.state_dict()[name])

    def test_patience(self, planted, monkeypatch):
        dataset, features = planted
        scores = iter([0.2, 0.3, 0.1, 0.25])
        monkeypatch.setattr(training, "_validation_score", lambda model, data, config: next(scores))
        report, _ = train(dataset, features, None, _small_config(variant="backbone", patience=2, max_epochs=10))
        assert report.initial_metric == 0.2
        assert report.best_epoch == 1
        assert report.best_metric == 0.3
        assert report.stop_epoch == 3
        assert report.stop_reason == "early_stop"
        assert len(report.epochs) == 3

    def test_worse_first_epoch_keeps_initial_state(self, planted, monkeypatch):
        dataset, features = planted
        scores = iter([0.5, 0.4, 0.3, 0.2, 0.1])
        monkeypatch.setattr(training, "_validation_score", lambda model, data, config: next(scores))
        config = _small_config(variant="backbone", patience=1, max_epochs=10)
        report, model = train(dataset, features, None, config)
        assert report.best_epoch == 0
        assert report.best_metric == report.initial_metric == 0.5
        assert report.stop_epoch == 1
        untrained = build_model(dataset, None, dim=config.dim, backbone=config.backbone,
                                backbone_layers=config.backbone_layers, layers=config.layers, seed=config.seed)
        for name, value in untrained.state_dict().items():
            assert torch.equal(value, model.state_dict()[name])

    def test_best_never_below_an_earlier_epoch(self, planted, monkeypatch):
        dataset, features = planted
        history = [0.4, 0.1, 0.35, 0.2, 0.05]
        scores = iter(history)
        monkeypatch.setattr(training, "_validation_score", lambda model, data, config: next(scores))
        report, _ = train(dataset, features, None, _small_config(variant="backbone", patience=4, max_epochs=10))
        assert report.best_metric == max(history)
        assert report.best_epoch == 0

    def test_max_epochs(self, planted):
        dataset, features = planted
        report, _ = train(dataset, features, None, _small_config(variant="backbone", max_epochs=2))
        assert report.stop_epoch == 2
        assert report.stop_reason == "max_epochs"

    def test_loss_dump(self, planted, tmp_path):
        dataset, features = planted
        dump = tmp_path / "losses.csv"
        train(dataset, features, None, _small_config(variant="backbone", max_epochs=1), loss_dump=dump)
        lines = dump.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("epoch,step,ranking")
        assert len(lines) == 1 + len(sample_triples(dataset, 128, 0, 1))

    def test_divergence(self, planted, monkeypatch):
        dataset, features = planted
        real = training.batch_objective

        def exploding(*args, **kwargs):
            breakdown = real(*args, **kwargs)
            breakdown.total = breakdown.total * float("nan")
            return breakdown

        monkeypatch.setattr(training, "batch_objective", exploding)
        with pytest.raises(DivergenceError) as info:
            train(dataset, features, None, _small_config(variant="backbone"))
        assert info.value.last_finite_epoch == 0
        assert info.value.report.stop_reason == "diverged"

    def test_graph_variant_needs_graphs(self, planted):
        dataset, features = planted
        with pytest.raises(PreconditionError):
            train(dataset, features, None, _small_config(variant="DIIG"))


class TestGradCheck:
    """Test autograd against central differences"""

    @pytest.mark.parametrize("loss", LOSS_SELECTORS)
    def test_every_term_over_seeds(self, loss):
        errors = [grad_check(loss, seed=seed) for seed in range(20)]
        assert max(errors) <= GRAD_CHECK_TOLERANCE

    def test_largest_instance(self):
        assert grad_check("total", num_users=10, num_items=16, dim=8, seed=7) <= GRAD_CHECK_TOLERANCE

    def test_relative_error(self):
        assert relative_error(2.0, 2.0 + 2e-5) == pytest.approx(1e-5, rel=1e-3)
        assert relative_error(-0.5, 0.5) == pytest.approx(2.0)

    def test_floor_turns_tiny_entries_absolute(self):
        assert relative_error(1e-6, 3e-6) == pytest.approx(2e-6 / GRAD_CHECK_FLOOR)
        assert relative_error(1e-6, 3e-6, floor=1e-12) == pytest.approx(2 / 3)
        assert relative_error(0.0, 0.0) == 0.0

    def test_unknown_loss(self):
        with pytest.raises(ValueError):
            grad_check("hinge")
