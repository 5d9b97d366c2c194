"""Tests for selrobust.models."""

from __future__ import annotations

import numpy as np
import pytest
import yaml

from selrobust.errors import DegenerateInputError, ShapeError, StnsFormatError
from selrobust.models import (
    MANIFEST_NAME,
    ConvBlockSpec,
    NetworkSpec,
    UnitActivations,
    accuracy,
    build_network,
    collect_activations,
    dead_units,
    load_checkpoint,
    micronet_spec,
    save_checkpoint,
)
from selrobust.tensor.rng import Rng


class TestNetworkSpec:
    def test_default_micronet_parameter_count(self):
        # conv: weights + gamma + beta per block; dense: weights + bias
        conv1 = 16 * 1 * 9 + 2 * 16
        conv2 = 32 * 16 * 9 + 2 * 32
        conv3 = 64 * 32 * 9 + 2 * 64
        flat = 64 * 2 * 2
        fc1 = flat * 64 + 64
        logits = 64 * 8 + 8
        expected = conv1 + conv2 + conv3 + fc1 + logits
        net = build_network(micronet_spec(), Rng(0))
        assert net.num_parameters() == expected == 40376

    def test_tap_names_follow_depth(self, tiny_spec):
        assert tiny_spec.tap_names == ["conv1", "conv2", "fc1"]

    def test_feature_shapes(self, tiny_spec):
        assert tiny_spec.feature_shapes() == [(2, 4, 4), (3, 2, 2)]
        assert tiny_spec.flat_features == 12

    def test_spatial_collapse_rejected(self):
        with pytest.raises(ShapeError, match="collapses"):
            micronet_spec(input_shape=(1, 4, 4), widths=(4, 4, 4))

    def test_single_class_rejected(self):
        with pytest.raises(ShapeError):
            NetworkSpec(input_shape=(1, 8, 8), n_classes=1)

    def test_bad_pool_kind(self):
        with pytest.raises(ShapeError):
            ConvBlockSpec(width=4, pool="median")

    def test_dict_round_trip(self, tiny_spec):
        assert NetworkSpec.from_dict(tiny_spec.to_dict()) == tiny_spec


class TestBuildNetwork:
    def test_logit_shape(self):
        spec = micronet_spec(input_shape=(1, 16, 16), n_classes=5, widths=(4, 8), hidden=())
        net = build_network(spec, Rng(1))
        assert net(np.zeros((4, 1, 16, 16))).shape == (4, 5)

    def test_same_seed_same_parameters(self, tiny_spec):
        a = build_network(tiny_spec, Rng(3)).state()
        b = build_network(tiny_spec, Rng(3)).state()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_different_seed_different_parameters(self, tiny_spec):
        a = build_network(tiny_spec, Rng(3)).state()
        b = build_network(tiny_spec, Rng(4)).state()
        assert not np.array_equal(a["conv1.weight"], b["conv1.weight"])

    def test_without_batchnorm_uses_bias(self):
        spec = micronet_spec(input_shape=(1, 8, 8), n_classes=2, widths=(2,), hidden=(), batchnorm=False)
        net = build_network(spec, Rng(0))
        assert "conv1.bias" in net.params
        assert not net.buffers

    def test_wrong_input_shape(self, tiny_net):
        with pytest.raises(ShapeError):
            tiny_net(np.zeros((2, 1, 9, 9)))


class TestActivations:
    def test_taps_are_non_negative_and_sized_by_channels(self, tiny_net, rng):
        _, acts = collect_activations(tiny_net, rng.uniform(size=(5, 1, 8, 8)))
        assert acts.tap_names == ["conv1", "conv2", "fc1"]
        assert acts["conv1"].shape == (5, 2)
        assert acts["conv2"].shape == (5, 3)
        assert acts["fc1"].shape == (5, 4)
        for _, matrix in acts.items():
            assert (matrix >= 0).all()

    def test_conv_tap_is_spatial_mean_of_relu(self, rng):
        spec = micronet_spec(input_shape=(1, 6, 6), n_classes=2, widths=(3,), hidden=(), batchnorm=False)
        net = build_network(spec, Rng(0)).eval()
        x = rng.uniform(size=(2, 1, 6, 6))
        _, taps = net.forward_with_taps(x)
        w = net.params["conv1.weight"].data
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        fmap = np.zeros((2, 3, 6, 6))
        for i in range(6):
            for j in range(6):
                fmap[:, :, i, j] = np.einsum("nchw,fchw->nf", padded[:, :, i:i + 3, j:j + 3], w)
        np.testing.assert_allclose(taps["conv1"].data, np.maximum(fmap, 0).mean(axis=(2, 3)), atol=1e-12)

    def test_eval_mode_is_batch_independent(self, trained_net, tiny_splits):
        images = tiny_splits.test.images
        full, _ = collect_activations(trained_net, images, batch_size=256)
        chunked, _ = collect_activations(trained_net, images, batch_size=3)
        np.testing.assert_allclose(full, chunked, atol=1e-12)

    def test_collect_restores_training_flag(self, tiny_net, rng):
        tiny_net.train()
        collect_activations(tiny_net, rng.uniform(size=(2, 1, 8, 8)))
        assert tiny_net.training

    def test_empty_dataset(self, tiny_net):
        with pytest.raises(DegenerateInputError):
            collect_activations(tiny_net, np.zeros((0, 1, 8, 8)))

    def test_mismatched_sample_counts(self):
        with pytest.raises(ShapeError):
            UnitActivations({"a": np.zeros((3, 2)), "b": np.zeros((4, 2))})


class TestDeadUnits:
    def test_counts_and_proportions(self):
        acts = UnitActivations({
            "conv1": np.array([[0.0, 1.0, 0.0], [0.0, 2.0, 0.5]]),
            "fc1": np.array([[0.0, 0.0], [0.0, 0.0]]),
        })
        report = dead_units(acts)
        assert report.counts == {"conv1": 1, "fc1": 2}
        assert report.proportions["conv1"] == pytest.approx(1 / 3)
        assert report.proportions["fc1"] == 1.0
        assert report.overall_proportion == pytest.approx(3 / 5)

    def test_threshold(self):
        acts = UnitActivations({"fc1": np.array([[0.05, 0.2], [0.01, 0.0]])})
        assert dead_units(acts, threshold=0.1).counts == {"fc1": 1}

    def test_empty(self):
        with pytest.raises(DegenerateInputError):
            dead_units(UnitActivations())


class TestCheckpoint:
    def test_round_trip_preserves_outputs(self, trained_net, tiny_splits, tmp_path):
        save_checkpoint(trained_net, tmp_path / "ckpt", extra={"epoch": 1})
        restored = load_checkpoint(tmp_path / "ckpt")
        assert not restored.training
        assert restored.spec == trained_net.spec
        images, labels = tiny_splits.test.images, tiny_splits.test.labels
        before, _ = collect_activations(trained_net, images)
        after, _ = collect_activations(restored, images)
        np.testing.assert_array_equal(before, after)
        assert accuracy(restored, images, labels) == accuracy(trained_net, images, labels)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(StnsFormatError, match="manifest"):
            load_checkpoint(tmp_path)

    def test_unsupported_format(self, tiny_net, tmp_path):
        path = save_checkpoint(tiny_net, tmp_path / "ckpt")
        manifest_path = path / MANIFEST_NAME
        manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
        manifest["format"] = "pickle"
        manifest_path.write_text(yaml.safe_dump(manifest), encoding="utf-8")
        with pytest.raises(StnsFormatError, match="unsupported checkpoint format"):
            load_checkpoint(path)


class TestSpatialMeanLinearity:
    @pytest.mark.parametrize("factor", [0.0, 0.5, 2.0])
    def test_contrast_scales_conv_unit(self, rng, factor):
        spec = micronet_spec(input_shape=(1, 8, 8), n_classes=2, widths=(3,), hidden=(), batchnorm=False,
                             pool="none")
        net = build_network(spec, Rng(1))
        images = rng.uniform(0.0, 0.5, size=(5, 1, 8, 8))
        _, clean = collect_activations(net, images)
        _, scaled = collect_activations(net, factor * images)
        np.testing.assert_allclose(scaled.layers["conv1"], factor * clean.layers["conv1"], rtol=1e-12, atol=1e-15)
