"""Tests for selrobust.attacks."""

from __future__ import annotations

import numpy as np
import pytest

from selrobust.attacks import (
    AttackConfig,
    fgsm,
    input_output_jacobian,
    input_unit_gradient_norms,
    jacobian_norm,
    per_sample_loss,
    perturb,
    pgd,
    pgd_train,
    transfer_eval,
)
from selrobust.config import TrainSettings
from selrobust.data import generate_synthetic_dataset
from selrobust.errors import ShapeError
from selrobust.models import NetworkSpec, accuracy, build_network, collect_activations, micronet_spec
from selrobust.tensor.rng import Rng
from selrobust.tensor.tensor import no_grad
from selrobust.training import fit


def _numeric_jacobian(net, x, step=1e-6):
    flat = x.reshape(len(x), -1)
    n_in = flat.shape[1]
    jac = np.zeros((len(x), net.spec.n_classes, n_in))
    with net.evaluating(), no_grad():
        for i in range(n_in):
            up, down = flat.copy(), flat.copy()
            up[:, i] += step
            down[:, i] -= step
            diff = net(up.reshape(x.shape)).data - net(down.reshape(x.shape)).data
            jac[:, :, i] = diff / (2 * step)
    return jac


class TestAttackConfig:
    def test_pgd_step_defaults_to_fraction_of_epsilon(self):
        config = AttackConfig.pgd(0.2, 10)
        assert config.step_size == pytest.approx(0.02)
        assert config.kind == "pgd"

    def test_pgd_at_zero_epsilon_keeps_positive_step(self):
        assert AttackConfig.pgd(0.0, 3).step_size > 0

    def test_explicit_step(self):
        assert AttackConfig.pgd(0.2, 10, step_size=1e-4).step_size == 1e-4

    @pytest.mark.parametrize("kwargs", [
        {"kind": "cw"},
        {"epsilon": -0.1},
        {"kind": "pgd", "step_size": None},
        {"kind": "pgd", "step_size": 0.01, "iterations": -1},
        {"bounds": (1.0, 0.0)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AttackConfig(**kwargs)


class TestPerturbations:
    @pytest.mark.parametrize("epsilon", [0.0, 1 / 255, 16 / 255, 0.3])
    def test_fgsm_containment(self, trained_net, tiny_splits, epsilon):
        test = tiny_splits.test
        result = fgsm(trained_net, test.images, test.labels, AttackConfig(epsilon=epsilon))
        delta = np.abs(result.perturbed - test.images)
        assert delta.max() <= epsilon + 1e-12
        assert result.perturbed.min() >= 0.0
        assert result.perturbed.max() <= 1.0

    @pytest.mark.parametrize("iterations", [1, 5])
    def test_pgd_containment(self, trained_net, tiny_splits, iterations):
        test = tiny_splits.test
        config = AttackConfig.pgd(16 / 255, iterations)
        result = pgd(trained_net, test.images, test.labels, config)
        assert np.abs(result.perturbed - test.images).max() <= 16 / 255 + 1e-12
        assert 0.0 <= result.perturbed.min() and result.perturbed.max() <= 1.0

    def test_zero_epsilon_is_clean(self, trained_net, tiny_splits):
        test = tiny_splits.test
        result = fgsm(trained_net, test.images, test.labels, AttackConfig(epsilon=0.0))
        np.testing.assert_array_equal(result.perturbed, test.images)
        assert result.adversarial_accuracy == result.clean_accuracy

    def test_single_full_step_pgd_equals_fgsm(self, trained_net, tiny_splits):
        test = tiny_splits.test
        eps = 8 / 255
        a = fgsm(trained_net, test.images, test.labels, AttackConfig(epsilon=eps))
        b = pgd(trained_net, test.images, test.labels, AttackConfig(kind="pgd", epsilon=eps, step_size=eps,
                                                                     iterations=1))
        np.testing.assert_array_equal(a.perturbed, b.perturbed)

    def test_zero_iterations_is_identity(self, trained_net, tiny_splits):
        test = tiny_splits.test
        out = perturb(trained_net, test.images, test.labels, AttackConfig.pgd(0.1, 0))
        np.testing.assert_array_equal(out, test.images)

    def test_batching_does_not_change_result(self, trained_net, tiny_splits):
        test = tiny_splits.test
        config = AttackConfig.pgd(0.1, 3)
        full = perturb(trained_net, test.images, test.labels, config, batch_size=256)
        chunked = perturb(trained_net, test.images, test.labels, config, batch_size=5)
        np.testing.assert_allclose(full, chunked, atol=1e-12)

    def test_attack_leaves_parameters_and_mode(self, trained_net, tiny_splits):
        test = tiny_splits.test
        before = trained_net.state()
        trained_net.train()
        fgsm(trained_net, test.images, test.labels, AttackConfig(epsilon=0.1))
        assert trained_net.training
        for name, value in trained_net.state().items():
            np.testing.assert_array_equal(value, before[name])
        for p in trained_net.parameters().values():
            assert p.requires_grad and p.grad is None

    def test_out_of_range_input(self, trained_net):
        with pytest.raises(ValueError, match="bounds"):
            perturb(trained_net, np.full((1, 1, 8, 8), 1.5), np.array([0]), AttackConfig(epsilon=0.1))

    def test_label_count_mismatch(self, trained_net):
        with pytest.raises(ShapeError):
            perturb(trained_net, np.zeros((2, 1, 8, 8)), np.array([0]), AttackConfig(epsilon=0.1))

    def test_summary_fields(self, trained_net, tiny_splits):
        test = tiny_splits.test
        summary = fgsm(trained_net, test.images, test.labels, AttackConfig(epsilon=0.05)).summary()
        assert set(summary) == {"config", "clean_accuracy", "adversarial_accuracy",
                                "mean_loss_before", "mean_loss_after"}
        assert summary["config"]["bounds"] == [0.0, 1.0]


@pytest.fixture(scope="module")
def four_class_setup():
    """A 4-class micronet trained for a few epochs, and its test split."""
    splits = generate_synthetic_dataset(seed=5, n_classes=4, train_per_class=40, val_per_class=10,
                                        test_per_class=25, image_size=12)
    spec = micronet_spec(input_shape=(1, 12, 12), n_classes=4, widths=(4, 8), hidden=(16,))
    net = build_network(spec, Rng(0))
    fit(net, splits, TrainSettings(epochs=4, batch_size=32, learning_rate=0.05, anneal_epochs=()), seed=0)
    return net, splits.test


def _share(mask):
    return float(np.mean(mask))


class TestLossGrowth:
    EPSILON = 16 / 255

    def test_pgd_loss_never_below_clean(self, four_class_setup):
        net, test = four_class_setup
        clean = per_sample_loss(net, test.images, test.labels)
        for k in range(1, 11):
            adversarial = perturb(net, test.images, test.labels, AttackConfig.pgd(self.EPSILON, k))
            after = per_sample_loss(net, adversarial, test.labels)
            assert _share(after >= clean - 1e-12) >= 0.95, k

    def test_small_fgsm_step_raises_loss(self, four_class_setup):
        net, test = four_class_setup
        result = fgsm(net, test.images, test.labels, AttackConfig(epsilon=1e-4))
        assert _share(result.loss_after >= result.loss_before - 1e-12) >= 0.95

    def test_forty_step_pgd_beats_fgsm(self, four_class_setup):
        net, test = four_class_setup
        single = fgsm(net, test.images, test.labels, AttackConfig(epsilon=self.EPSILON))
        iterated = pgd(net, test.images, test.labels, AttackConfig.pgd(self.EPSILON, 40))
        assert _share(iterated.loss_after >= single.loss_after) >= 0.90


class TestTransfer:
    def test_matches_target_accuracy_on_source_examples(self, trained_net, tiny_spec, tiny_splits):
        test = tiny_splits.test
        target = build_network(tiny_spec, Rng(9)).eval()
        config = AttackConfig(epsilon=0.1)
        adversarial = perturb(trained_net, test.images, test.labels, config)
        expected = accuracy(target, adversarial, test.labels)
        assert transfer_eval(trained_net, target, test.images, test.labels, config) == expected

    def test_class_count_mismatch(self, trained_net):
        other = build_network(NetworkSpec(input_shape=(1, 8, 8), n_classes=4), Rng(0))
        with pytest.raises(ShapeError):
            transfer_eval(trained_net, other, np.zeros((1, 1, 8, 8)), np.array([0]), AttackConfig())


class TestPgdTraining:
    def test_zero_steps_matches_standard_training(self, tiny_spec, tiny_splits, tiny_train_settings):
        plain = build_network(tiny_spec, Rng(5))
        fit(plain, tiny_splits, tiny_train_settings, seed=5)
        adv = build_network(tiny_spec, Rng(5))
        pgd_train(adv, tiny_splits, AttackConfig.pgd(0.1, 0), tiny_train_settings, seed=5)
        for name, value in plain.state().items():
            np.testing.assert_array_equal(adv.state()[name], value)

    def test_history_recorded(self, tiny_spec, tiny_splits, tiny_train_settings):
        net = build_network(tiny_spec, Rng(5))
        result = pgd_train(net, tiny_splits, AttackConfig.pgd(0.05, 2), tiny_train_settings, seed=5)
        assert len(result.history) == tiny_train_settings.epochs
        assert all(0.0 <= s.val_accuracy <= 1.0 for s in result.history)


class TestJacobian:
    def test_linear_model_frobenius_equals_weight_norm(self, rng):
        net = build_network(NetworkSpec(input_shape=(1, 3, 3), n_classes=4), Rng(2))
        weight = net.params["logits.weight"].data
        report = jacobian_norm(net, rng.uniform(size=(5, 1, 3, 3)))
        np.testing.assert_allclose(report.per_sample, np.linalg.norm(weight), atol=1e-12)
        assert report.norm == "frobenius"

    def test_linear_model_spectral_equals_top_singular_value(self, rng):
        net = build_network(NetworkSpec(input_shape=(1, 3, 3), n_classes=4), Rng(2))
        weight = net.params["logits.weight"].data
        report = jacobian_norm(net, rng.uniform(size=(3, 1, 3, 3)), spectral=True)
        np.testing.assert_allclose(report.per_sample, np.linalg.svd(weight, compute_uv=False)[0], atol=1e-12)

    def test_matches_finite_differences(self, trained_net, rng):
        x = rng.uniform(0.1, 0.9, size=(2, 1, 8, 8))
        analytic = input_output_jacobian(trained_net, x)
        numeric = _numeric_jacobian(trained_net, x)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        assert (np.abs(analytic - numeric) / scale).max() <= 1e-5

    def test_mean_over_samples(self, trained_net, rng):
        report = jacobian_norm(trained_net, rng.uniform(size=(7, 1, 8, 8)), batch_size=3)
        assert report.per_sample.shape == (7,)
        assert report.mean == pytest.approx(report.per_sample.mean())


class TestInputUnitGradients:
    def test_matches_finite_differences(self, trained_net, rng):
        x = rng.uniform(0.1, 0.9, size=(2, 1, 8, 8))
        analytic = input_unit_gradient_norms(trained_net, x, "fc1")
        step = 1e-6
        flat = x.reshape(2, -1)
        grads = np.zeros((2, 4, flat.shape[1]))
        for i in range(flat.shape[1]):
            up, down = flat.copy(), flat.copy()
            up[:, i] += step
            down[:, i] -= step
            _, a_up = collect_activations(trained_net, up.reshape(x.shape))
            _, a_down = collect_activations(trained_net, down.reshape(x.shape))
            grads[:, :, i] = (a_up["fc1"] - a_down["fc1"]) / (2 * step)
        numeric = np.linalg.norm(grads, axis=2)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)

    def test_shape_per_tap(self, trained_net, rng):
        norms = input_unit_gradient_norms(trained_net, rng.uniform(size=(3, 1, 8, 8)), "conv2", batch_size=2)
        assert norms.shape == (3, 3)
        assert (norms >= 0).all()

    def test_unknown_tap(self, trained_net):
        with pytest.raises(ShapeError, match="unknown tap"):
            input_unit_gradient_norms(trained_net, np.zeros((1, 1, 8, 8)), "conv9")
