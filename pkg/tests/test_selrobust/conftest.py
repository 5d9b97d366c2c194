"""Shared fixtures for selrobust tests: tiny specs, datasets, trained nets and configs."""

from __future__ import annotations

import numpy as np
import pytest

from selrobust.config import TrainSettings
from selrobust.data import generate_synthetic_dataset
from selrobust.models import build_network, micronet_spec
from selrobust.tensor.rng import Rng
from selrobust.training import fit


@pytest.fixture(autouse=True)
def isolated_config_env(monkeypatch, tmp_path):
    """Keep user/project config and env overrides out of every test."""
    monkeypatch.setenv("SELROBUST_HOME", str(tmp_path / "selrobust-home"))
    monkeypatch.delenv("SELROBUST_OUTPUT_ROOT", raising=False)


@pytest.fixture
def tiny_spec():
    return micronet_spec(input_shape=(1, 8, 8), n_classes=3, widths=(2, 3), hidden=(4,))


@pytest.fixture
def tiny_net(tiny_spec):
    return build_network(tiny_spec, Rng(0))


@pytest.fixture(scope="session")
def tiny_splits():
    return generate_synthetic_dataset(
        seed=0, n_classes=3, train_per_class=10, val_per_class=4, test_per_class=4,
        image_size=8, noise=0.05,
    )


@pytest.fixture
def tiny_train_settings():
    return TrainSettings(epochs=2, batch_size=16, learning_rate=0.05, anneal_epochs=())


@pytest.fixture
def trained_net(tiny_spec, tiny_splits, tiny_train_settings):
    net = build_network(tiny_spec, Rng(0))
    fit(net, tiny_splits, tiny_train_settings, alpha=0.0, seed=0)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config_mapping(tmp_path):
    """A sweep-sized experiment config: seconds per cell, every family enabled."""
    return {
        "output_dir": str(tmp_path / "sweep"),
        "alphas": [-1.0, 0.0, 1.0],
        "seeds": [0, 1, 2],
        "data": {
            "seed": 7,
            "n_classes": 3,
            "image_size": 8,
            "train_per_class": 8,
            "val_per_class": 4,
            "test_per_class": 4,
        },
        "model": {"widths": [2, 3], "hidden": [4]},
        "train": {"epochs": 2, "batch_size": 12, "anneal_epochs": []},
        "attack": {"fgsm_epsilons": [0.0, 0.05], "pgd_steps": [1, 2]},
        "corruption": {"kinds": ["gaussian_noise", "brightness"]},
        "analysis": {"gradient_samples": 6, "dimensionality_pgd_steps": 2},
        "report": {"bootstrap_resamples": 50},
    }
