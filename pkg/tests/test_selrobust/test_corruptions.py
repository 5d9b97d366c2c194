"""Tests for selrobust.corruptions."""

from __future__ import annotations

import numpy as np
import pytest

from selrobust.corruptions import (
    CORRUPTION_KINDS,
    SEVERITIES,
    CorruptionSpec,
    CorruptionSuiteResult,
    apply_corruption,
    corrupt_batch,
    corruption_suite_eval,
    normalized_accuracy,
)
from selrobust.errors import DegenerateInputError, FloorEffectError


def _suite(table, clean):
    table = np.asarray(table, dtype=float)
    return CorruptionSuiteResult(
        kinds=CORRUPTION_KINDS[:table.shape[0]], severities=SEVERITIES, accuracy=table, clean_accuracy=clean,
    )


class TestApplyCorruption:
    def test_brightness_shift(self):
        out = apply_corruption(np.full((4, 4), 0.5), CorruptionSpec("brightness", 2))
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_brightness_clamps(self):
        out = apply_corruption(np.full((4, 4), 0.9), CorruptionSpec("brightness", 5))
        np.testing.assert_array_equal(out, 1.0)

    @pytest.mark.parametrize("severity", SEVERITIES)
    def test_contrast_fixes_constant_image(self, severity):
        image = np.full((1, 6, 6), 0.3)
        np.testing.assert_allclose(apply_corruption(image, CorruptionSpec("contrast", severity)), image, atol=1e-12)

    def test_blur_fixes_constant_image(self):
        image = np.full((8, 8), 0.4)
        np.testing.assert_allclose(apply_corruption(image, CorruptionSpec("gaussian_blur", 5)), image, atol=1e-12)

    @pytest.mark.parametrize("severity", [1, 2, 3])
    def test_gaussian_noise_std(self, severity):
        image = np.full((200, 200), 0.5)
        spec = CorruptionSpec("gaussian_noise", severity, seed=3)
        delta = apply_corruption(image, spec) - image
        assert delta.std() == pytest.approx(spec.parameter, rel=0.05)

    @pytest.mark.parametrize("kind", ["gaussian_noise", "shot_noise"])
    def test_noise_distortion_increases_with_severity(self, kind):
        image = np.full((64, 64), 0.5)
        distortion = [
            np.abs(apply_corruption(image, CorruptionSpec(kind, s, seed=11)) - image).mean()
            for s in SEVERITIES
        ]
        assert all(b > a * 1.05 for a, b in zip(distortion, distortion[1:])), distortion

    @pytest.mark.parametrize("kind", CORRUPTION_KINDS)
    def test_deterministic_and_in_range(self, kind, rng):
        image = rng.uniform(size=(1, 8, 8))
        spec = CorruptionSpec(kind, 4, seed=2, sample_index=7)
        a, b = apply_corruption(image, spec), apply_corruption(image, spec)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_seed_and_sample_index_change_noise(self):
        image = np.full((8, 8), 0.5)
        base = apply_corruption(image, CorruptionSpec("gaussian_noise", 3, seed=0))
        assert not np.array_equal(base, apply_corruption(image, CorruptionSpec("gaussian_noise", 3, seed=1)))
        assert not np.array_equal(
            base, apply_corruption(image, CorruptionSpec("gaussian_noise", 3, seed=0, sample_index=1)),
        )

    @pytest.mark.parametrize("severity", [0, 6])
    def test_invalid_severity(self, severity):
        with pytest.raises(ValueError, match="severity"):
            CorruptionSpec("gaussian_noise", severity)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            CorruptionSpec("fog", 1)

    def test_out_of_range_image(self):
        with pytest.raises(ValueError):
            apply_corruption(np.full((4, 4), 1.2), CorruptionSpec("brightness", 1))


class TestCorruptBatch:
    def test_severity_zero_is_identity(self, rng):
        images = rng.uniform(size=(3, 1, 4, 4))
        np.testing.assert_array_equal(corrupt_batch(images, "gaussian_noise", 0), images)

    def test_per_sample_streams(self):
        images = np.full((2, 1, 6, 6), 0.5)
        out = corrupt_batch(images, "gaussian_noise", 2, seed=0)
        assert not np.array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[1], apply_corruption(images[1], CorruptionSpec("gaussian_noise", 2,
                                                                                         seed=0, sample_index=1)))


class TestSuite:
    def test_identity_cell_equals_clean(self, trained_net, tiny_splits):
        test = tiny_splits.test
        suite = corruption_suite_eval(trained_net, test.images, test.labels, kinds=("brightness", "contrast"))
        assert suite.identity_accuracy == suite.clean_accuracy
        assert suite.accuracy.shape == (2, 5)

    def test_grand_mean_is_cell_average(self, trained_net, tiny_splits):
        test = tiny_splits.test
        suite = corruption_suite_eval(trained_net, test.images, test.labels, seeds=(0, 1))
        total = 0.0
        for row in suite.rows():
            total += row["accuracy"]
        assert suite.grand_mean == pytest.approx(total / 25, abs=1e-12)
        assert len(suite.rows()) == 25
        assert set(suite.summary()["severity_means"]) == {"1", "2", "3", "4", "5"}

    def test_empty_dataset(self, trained_net):
        with pytest.raises(DegenerateInputError):
            corruption_suite_eval(trained_net, np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int))


class TestNormalizedAccuracy:
    def test_equal_to_clean(self):
        assert normalized_accuracy(_suite(np.full((2, 5), 0.8), 0.8)) == pytest.approx(1.0)

    def test_ratio(self):
        assert normalized_accuracy(_suite(np.full((1, 5), 0.25), 0.5)) == pytest.approx(0.5)

    def test_floor_effect(self):
        suite = _suite(np.zeros((1, 5)), 0.0)
        with pytest.raises(FloorEffectError):
            normalized_accuracy(suite)
        assert suite.summary()["normalized_accuracy"] is None
