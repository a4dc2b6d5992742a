"""
test_noise.py - Feature replacement and feedback addition/removal
"""

import numpy as np
import pytest

from damrs.config import NoiseSpec
from damrs.dataset import ModalityFeatures
from damrs.errors import ConfigError, SaturationError
from damrs.noise import apply_noise, inject_feature_noise, inject_feedback_noise, noise_count
from damrs.tests.conftest import make_dataset


def _codes(pairs, num_items):
    return set((pairs[:, 0] * num_items + pairs[:, 1]).tolist())


@pytest.fixture
def feedback_dataset():
    """10 users x 20 items: 100 train pairs, one val and one test pair per user"""
    train = [(u, i) for u in range(10) for i in range(10)]
    return make_dataset(10, 20, train, val=[(u, 10) for u in range(10)], test=[(u, 11) for u in range(10)])


@pytest.fixture
def distinct_features():
    return ModalityFeatures("v", np.arange(30, dtype=np.float32).reshape(10, 3))


class TestNoiseCount:
    def test_rounding(self):
        assert noise_count(0.05, 7050) == 353
        assert noise_count(0.2, 10) == 2
        assert noise_count(0.0, 100) == 0
        assert noise_count(0.1, 101) == 11


class TestFeatureNoise:
    """Test row replacement on one modality"""

    def test_zero_ratio_is_identity(self, distinct_features):
        spec = NoiseSpec(kind="feature-replace", ratio=0.0, target_modality="v", seed=7)
        noisy = inject_feature_noise(distinct_features, spec)
        np.testing.assert_array_equal(noisy.matrix, distinct_features.matrix)

    def test_replaces_exact_count_with_other_rows(self, distinct_features):
        spec = NoiseSpec(kind="feature-replace", ratio=0.2, target_modality="v", seed=7)
        noisy = inject_feature_noise(distinct_features, spec).matrix
        original = distinct_features.matrix
        changed = np.flatnonzero(np.any(noisy != original, axis=1))
        assert len(changed) == 2
        for row in changed:
            sources = np.flatnonzero(np.all(original == noisy[row], axis=1))
            assert len(sources) == 1 and sources[0] != row

    def test_deterministic(self, distinct_features):
        spec = NoiseSpec(kind="feature-replace", ratio=0.2, target_modality="v", seed=11)
        first = inject_feature_noise(distinct_features, spec).matrix
        second = inject_feature_noise(distinct_features, spec).matrix
        assert first.tobytes() == second.tobytes()

    def test_wrong_modality(self, distinct_features):
        spec = NoiseSpec(kind="feature-replace", ratio=0.1, target_modality="t")
        with pytest.raises(ConfigError):
            inject_feature_noise(distinct_features, spec)

    def test_input_untouched(self, distinct_features):
        before = distinct_features.matrix.copy()
        inject_feature_noise(distinct_features, NoiseSpec(kind="feature-replace", ratio=0.2,
                                                           target_modality="v", seed=1))
        np.testing.assert_array_equal(distinct_features.matrix, before)


class TestFeedbackNoise:
    """Test train-pair removal and addition"""

    def test_zero_ratio(self, feedback_dataset):
        spec = NoiseSpec(kind="feedback-add", ratio=0.0)
        assert inject_feedback_noise(feedback_dataset, spec) is feedback_dataset

    def test_remove(self, feedback_dataset):
        noisy = inject_feedback_noise(feedback_dataset, NoiseSpec(kind="feedback-remove", ratio=0.1, seed=3))
        assert len(noisy.train) == 90
        assert _codes(noisy.train, 20) <= _codes(feedback_dataset.train, 20)
        np.testing.assert_array_equal(noisy.val, feedback_dataset.val)
        np.testing.assert_array_equal(noisy.test, feedback_dataset.test)

    @pytest.mark.parametrize("num_items", [20, 200])
    def test_add(self, num_items):
        train = [(u, i) for u in range(10) for i in range(10)]
        dataset = make_dataset(10, num_items, train, val=[(u, 10) for u in range(10)],
                               test=[(u, 11) for u in range(10)])
        noisy = inject_feedback_noise(dataset, NoiseSpec(kind="feedback-add", ratio=0.1, seed=3))
        assert len(noisy.train) == 110
        occupied = _codes(dataset.train, num_items) | _codes(dataset.val, num_items) | _codes(dataset.test, num_items)
        added = _codes(noisy.train, num_items) - _codes(dataset.train, num_items)
        assert len(added) == 10
        assert not added & occupied

    def test_deterministic(self, feedback_dataset):
        spec = NoiseSpec(kind="feedback-add", ratio=0.1, seed=5)
        first = inject_feedback_noise(feedback_dataset, spec)
        second = inject_feedback_noise(feedback_dataset, spec)
        assert first.train.tobytes() == second.train.tobytes()

    def test_remove_then_add_is_not_identity(self, feedback_dataset):
        removed = inject_feedback_noise(feedback_dataset, NoiseSpec(kind="feedback-remove", ratio=0.1, seed=1))
        restored = inject_feedback_noise(removed, NoiseSpec(kind="feedback-add", ratio=0.1111, seed=2))
        assert len(restored.train) == 100
        assert _codes(restored.train, 20) != _codes(feedback_dataset.train, 20)

    def test_add_saturation(self):
        dataset = make_dataset(2, 2, [(0, 0), (1, 0), (0, 1)])
        with pytest.raises(SaturationError):
            inject_feedback_noise(dataset, NoiseSpec(kind="feedback-add", ratio=1.0, allow_large_ratio=True))

    def test_remove_keeps_last_pair_of_evaluated_user(self):
        dataset = make_dataset(1, 2, [(0, 0)], val=[(0, 1)])
        with pytest.raises(SaturationError):
            inject_feedback_noise(dataset, NoiseSpec(kind="feedback-remove", ratio=1.0, allow_large_ratio=True))


class TestApplyNoise:
    def test_record(self, feedback_dataset):
        features = [ModalityFeatures("v", np.zeros((20, 2), dtype=np.float32))]
        spec = NoiseSpec(kind="feedback-remove", ratio=0.05, seed=0)
        dataset, _, record = apply_noise(feedback_dataset, features, spec)
        assert record["affected"] == 5
        assert record["kind"] == "feedback-remove"
        assert len(dataset.train) == 95

    def test_unknown_modality(self, feedback_dataset):
        spec = NoiseSpec(kind="feature-replace", ratio=0.1, target_modality="a")
        with pytest.raises(ConfigError):
            apply_noise(feedback_dataset, [ModalityFeatures("v", np.zeros((20, 2)))], spec)
