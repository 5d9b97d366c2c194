"""Parametric average-case corruptions with five graded severities, and suite evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from selrobust.errors import DegenerateInputError, FloorEffectError
from selrobust.models import Network, accuracy
from selrobust.tensor.rng import STREAM_CORRUPTION, Rng

logger = logging.getLogger(__name__)

SEVERITIES = (1, 2, 3, 4, 5)

# Stable indices feed the per-sample seed derivation; never reorder.
CORRUPTION_KINDS: Tuple[str, ...] = (
    "gaussian_noise",
    "shot_noise",
    "brightness",
    "contrast",
    "gaussian_blur",
)
KIND_INDEX: Dict[str, int] = {kind: i for i, kind in enumerate(CORRUPTION_KINDS)}

SEVERITY_PARAMETERS: Dict[str, Tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),
    "gaussian_blur": (0.4, 0.6, 0.9, 1.3, 1.8),
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0
    sample_index: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KIND_INDEX:
            raise ValueError(f"Unknown corruption kind: {self.kind!r}. Must be one of {CORRUPTION_KINDS}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"Invalid severity level: {self.severity}. Must be in {list(SEVERITIES)}")

    @property
    def parameter(self) -> float:
        return SEVERITY_PARAMETERS[self.kind][self.severity - 1]

    def rng(self) -> Rng:
        return Rng(self.seed).derive(STREAM_CORRUPTION, KIND_INDEX[self.kind], self.severity, self.sample_index)


def _spatial_sigma(image: np.ndarray, value: float) -> Tuple[float, ...]:
    # blur only the trailing two (spatial) axes
    return (0.0,) * (image.ndim - 2) + (value, value)


def apply_corruption(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt one ``[H, W]`` or ``[C, H, W]`` image in [0, 1]; deterministic given (image, spec)."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ValueError(f"expected an [H, W] or [C, H, W] image, got shape {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("image pixels must lie in [0, 1]")
    p = spec.parameter
    if spec.kind == "gaussian_noise":
        out = x + spec.rng().normal(0.0, p, size=x.shape)
    elif spec.kind == "shot_noise":
        out = spec.rng().poisson(x * p) / p
    elif spec.kind == "brightness":
        out = x + p
    elif spec.kind == "contrast":
        mean = x.mean()
        out = (x - mean) * p + mean
    else:
        radius = math.ceil(3 * p)
        out = gaussian_filter(
            x, sigma=_spatial_sigma(x, p), mode="reflect",
            radius=(0,) * (x.ndim - 2) + (radius, radius),
        )
    return np.clip(out, 0.0, 1.0)


def corrupt_batch(images: np.ndarray, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """Corrupt every image; severity 0 is the identity pseudo-cell."""
    images = np.asarray(images, dtype=np.float64)
    if severity == 0:
        return images.copy()
    return np.stack([
        apply_corruption(img, CorruptionSpec(kind, severity, seed=seed, sample_index=i))
        for i, img in enumerate(images)
    ])


@dataclass
class CorruptionSuiteResult:
    kinds: Tuple[str, ...]
    severities: Tuple[int, ...]
    accuracy: np.ndarray
    clean_accuracy: float
    seeds: Tuple[int, ...] = (0,)
    identity_accuracy: Optional[float] = None

    @property
    def grand_mean(self) -> float:
        return float(self.accuracy.mean())

    @property
    def severity_means(self) -> Dict[int, float]:
        return {s: float(self.accuracy[:, j].mean()) for j, s in enumerate(self.severities)}

    @property
    def kind_means(self) -> Dict[str, float]:
        return {k: float(self.accuracy[i].mean()) for i, k in enumerate(self.kinds)}

    def cell(self, kind: str, severity: int) -> float:
        return float(self.accuracy[self.kinds.index(kind), self.severities.index(severity)])

    def rows(self) -> List[Dict[str, object]]:
        return [
            {"kind": kind, "severity": sev, "accuracy": float(self.accuracy[i, j])}
            for i, kind in enumerate(self.kinds)
            for j, sev in enumerate(self.severities)
        ]

    def summary(self) -> Dict[str, object]:
        try:
            normalized: Optional[float] = normalized_accuracy(self)
        except FloorEffectError:
            normalized = None
        return {
            "clean_accuracy": self.clean_accuracy,
            "grand_mean": self.grand_mean,
            "normalized_accuracy": normalized,
            "identity_accuracy": self.identity_accuracy,
            "severity_means": {str(k): v for k, v in self.severity_means.items()},
            "kind_means": self.kind_means,
            "seeds": list(self.seeds),
        }


def corruption_suite_eval(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    seeds: Sequence[int] = (0,),
    kinds: Sequence[str] = CORRUPTION_KINDS,
    include_identity: bool = True,
    batch_size: int = 256,
) -> CorruptionSuiteResult:
    """Accuracy for every (kind, severity) cell, averaged over corruption seeds."""
    if len(images) == 0:
        raise DegenerateInputError("corruption_suite_eval needs a non-empty dataset")
    if not seeds:
        raise ValueError("corruption_suite_eval needs at least one seed")
    kinds = tuple(kinds)
    for kind in kinds:
        if kind not in KIND_INDEX:
            raise ValueError(f"Unknown corruption kind: {kind!r}")
    clean = accuracy(net, images, labels, batch_size)
    table = np.zeros((len(kinds), len(SEVERITIES)))
    for i, kind in enumerate(kinds):
        for j, severity in enumerate(SEVERITIES):
            scores = [accuracy(net, corrupt_batch(images, kind, severity, seed), labels, batch_size)
                      for seed in seeds]
            table[i, j] = float(np.mean(scores))
            logger.debug("corruption %s s=%d: accuracy %.4f", kind, severity, table[i, j])
    identity = None
    if include_identity:
        identity = accuracy(net, corrupt_batch(images, kinds[0], 0), labels, batch_size)
    return CorruptionSuiteResult(
        kinds=kinds, severities=SEVERITIES, accuracy=table, clean_accuracy=clean,
        seeds=tuple(int(s) for s in seeds), identity_accuracy=identity,
    )


def normalized_accuracy(suite: CorruptionSuiteResult) -> float:
    """Grand-mean corrupted accuracy divided by clean accuracy."""
    if suite.clean_accuracy <= 0:
        raise FloorEffectError("clean accuracy is 0, normalized corrupted accuracy is undefined")
    return suite.grand_mean / suite.clean_accuracy
