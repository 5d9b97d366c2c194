"""Procedurally rendered classification dataset and its on-disk layout.

Classes cycle through three pattern families (oriented bars, ring blobs,
checkerboards); within a family the class index sets orientation, blob
count or cell size. Every sample gets a random phase/offset, a random
contrast and additive pixel noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import yaml

from selrobust.errors import ConfigError, StnsFormatError
from selrobust.tensor.rng import STREAM_DATA, Rng
from selrobust.tensor.stns import read_stns, write_stns

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "dataset.yaml"
FAMILIES = ("bars", "blobs", "checkers")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, n: int) -> "Dataset":
        """First ``n`` samples, keeping class balance by taking them round-robin per class."""
        if n >= len(self):
            return self
        per_class = [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]
        picks = []
        rank = 0
        while len(picks) < n:
            for members in per_class:
                if rank < members.size and len(picks) < n:
                    picks.append(members[rank])
            rank += 1
        idx = np.sort(np.asarray(picks, dtype=np.int64))
        return Dataset(self.images[idx], self.labels[idx], self.ids[idx])


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset

    def __getitem__(self, name: str) -> Dataset:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


def _grid(size: int):
    coords = (np.arange(size) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="ij")


def render_pattern(label: int, n_classes: int, size: int, rng: Rng) -> np.ndarray:
    """Noise-free ``[size, size]`` pattern in [0, 1] for class ``label``."""
    family = FAMILIES[label % len(FAMILIES)]
    k = label // len(FAMILIES)
    per_family = -(-n_classes // len(FAMILIES))
    yy, xx = _grid(size)
    if family == "bars":
        theta = np.pi * k / per_family
        frequency = 2.0 + 0.5 * k
        phase = rng.uniform(0.0, 2 * np.pi)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        return 0.5 + 0.5 * np.sin(2 * np.pi * frequency * proj + phase)
    if family == "blobs":
        count = k + 1
        start = rng.uniform(0.0, 2 * np.pi)
        width = 0.08 + 0.02 * rng.uniform()
        out = np.zeros((size, size))
        for j in range(count):
            angle = start + 2 * np.pi * j / count
            cy, cx = 0.5 + 0.28 * np.sin(angle), 0.5 + 0.28 * np.cos(angle)
            out += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        return np.clip(out, 0.0, 1.0)
    cell = max(size // 2 ** (k + 1), 1)
    oy, ox = rng.integers(0, cell, size=2)
    rows = (np.arange(size)[:, None] + oy) // cell
    cols = (np.arange(size)[None, :] + ox) // cell
    return ((rows + cols) % 2).astype(np.float64)


def _render_split(rng: Rng, n_classes: int, per_class: int, size: int, noise: float,
                  id_offset: int) -> Dataset:
    labels = np.repeat(np.arange(n_classes), per_class)
    images = np.empty((labels.size, 1, size, size))
    for i, label in enumerate(labels):
        pattern = render_pattern(int(label), n_classes, size, rng)
        contrast = rng.uniform(0.7, 1.0)
        image = 0.5 + contrast * (pattern - 0.5) + rng.normal(0.0, noise, size=(size, size))
        images[i, 0] = np.clip(image, 0.0, 1.0)
    order = rng.permutation(labels.size)
    ids = np.arange(id_offset, id_offset + labels.size)
    return Dataset(images=images[order], labels=labels[order], ids=ids[order])


def generate_synthetic_dataset(
    seed: int,
    n_classes: int = 8,
    train_per_class: int = 200,
    val_per_class: int = 40,
    test_per_class: int = 40,
    image_size: int = 16,
    noise: float = 0.05,
) -> Splits:
    """Deterministic train/val/test splits; sample ids are unique across splits."""
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    if min(train_per_class, val_per_class, test_per_class) < 1:
        raise ConfigError("every split needs at least one sample per class")
    if image_size < 4:
        raise ConfigError(f"image_size must be >= 4, got {image_size}")
    if noise < 0:
        raise ConfigError(f"noise must be non-negative, got {noise}")
    root = Rng(seed).derive(STREAM_DATA)
    counts = {"train": train_per_class, "val": val_per_class, "test": test_per_class}
    parts: Dict[str, Dataset] = {}
    offset = 0
    for index, name in enumerate(SPLITS):
        parts[name] = _render_split(root.derive(index), n_classes, counts[name], image_size, noise, offset)
        offset += n_classes * counts[name]
    logger.debug("Generated dataset seed=%d: %s", seed, {k: len(v) for k, v in parts.items()})
    return Splits(**parts)


def save_dataset(splits: Splits, directory: Union[str, Path], meta: Optional[Dict[str, object]] = None) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, object] = {"format": 1, "splits": {}}
    for name in SPLITS:
        part = splits[name]
        manifest["splits"][name] = {
            "images": write_stns(root / f"{name}.images.stns", part.images).name,
            "labels": write_stns(root / f"{name}.labels.stns", part.labels.astype(np.float64)).name,
            "ids": write_stns(root / f"{name}.ids.stns", part.ids.astype(np.float64)).name,
            "count": len(part),
        }
    if meta:
        manifest["generator"] = dict(meta)
    (root / MANIFEST_NAME).write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    logger.debug("Saved dataset to %s", root)
    return root


def _as_int(values: np.ndarray, what: str) -> np.ndarray:
    as_int = values.astype(np.int64)
    if not np.array_equal(as_int, values):
        raise StnsFormatError(f"{what} are not integral")
    return as_int


def load_dataset(directory: Union[str, Path]) -> Splits:
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise StnsFormatError(
            f"no {MANIFEST_NAME} in {root}",
            hint="Create the dataset with 'selrobust gen-data --out DIR'.",
        )
    manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8")) or {}
    parts = {}
    for name in SPLITS:
        entry = manifest.get("splits", {}).get(name)
        if entry is None:
            raise StnsFormatError(f"dataset manifest lacks split {name!r}")
        parts[name] = Dataset(
            images=read_stns(root / entry["images"]),
            labels=_as_int(read_stns(root / entry["labels"]), f"{name} labels"),
            ids=_as_int(read_stns(root / entry["ids"]), f"{name} ids"),
        )
    return Splits(**parts)
