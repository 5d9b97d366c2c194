"""Gradient-variability statistics and representational dimensionality.

All statistics use population (ddof=0) standard deviations. PCA centers
columns before forming the covariance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import LinearRegression
from sklearn.neighbors import NearestNeighbors

from selrobust.attacks import AttackConfig, perturb
from selrobust.corruptions import CORRUPTION_KINDS, SEVERITIES, corrupt_batch
from selrobust.errors import DegenerateInputError, SelRobustError, ShapeError
from selrobust.models import Network, UnitActivations, collect_activations

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.90, 0.95, 0.99)
TWONN_MIN_POINTS = 10
PROFILE_MODES = ("clean", "difference-average-case", "difference-worst-case")
PERTURBATION_SOURCES = ("none", "corruption", "pgd")


@dataclass
class GradientVariabilityReport:
    mu_u: np.ndarray
    sigma_u: np.ndarray
    cv_u: np.ndarray
    mu_l: float
    sigma_l: float
    cv_l: float

    @property
    def mean_cv_u(self) -> float:
        """Mean CV over units with a defined CV (NaN if none)."""
        defined = self.cv_u[~np.isnan(self.cv_u)]
        return float(defined.mean()) if defined.size else float("nan")


def gradient_cv(norms: np.ndarray) -> GradientVariabilityReport:
    """CV_u across samples per unit, and CV_l = std(mu_u) / mean(mu_u) across units."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 2 or norms.shape[0] < 2 or norms.shape[1] < 2:
        raise DegenerateInputError(f"gradient_cv needs >= 2 samples and >= 2 units, got {norms.shape}")
    if np.any(norms < 0):
        raise ValueError("gradient norms must be non-negative")
    if not np.any(norms):
        raise DegenerateInputError("gradient norm matrix is all zero")
    mu_u = norms.mean(axis=0)
    sigma_u = norms.std(axis=0)
    cv_u = np.full(mu_u.shape, np.nan)
    defined = mu_u > 0
    cv_u[defined] = sigma_u[defined] / mu_u[defined]
    mu_l = float(mu_u.mean())
    sigma_l = float(mu_u.std())
    return GradientVariabilityReport(
        mu_u=mu_u, sigma_u=sigma_u, cv_u=cv_u, mu_l=mu_l, sigma_l=sigma_l, cv_l=sigma_l / mu_l,
    )


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")


def explained_variance_ratio(acts: np.ndarray) -> np.ndarray:
    """Descending explained-variance ratios of the centered data (empty if no variance)."""
    x = np.asarray(acts, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInputError(f"PCA needs a [samples >= 2, units] matrix, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigenvalues = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = eigenvalues.sum()
    scale = max(1.0, float(np.abs(x).max()))
    if np.sqrt(total) <= 1e-9 * scale:
        return np.zeros(0)
    return eigenvalues / total


def linear_dimensionality(acts: np.ndarray, threshold: float = 0.95) -> Tuple[int, float]:
    """(smallest k whose cumulative explained variance >= threshold, k / n_units).

    Data with zero total variance gives (0, 0.0).
    """
    _check_threshold(threshold)
    ratios = explained_variance_ratio(acts)
    n_units = np.asarray(acts).shape[1]
    if ratios.size == 0:
        return 0, 0.0
    cumulative = np.cumsum(ratios)
    count = int(np.searchsorted(cumulative, threshold - 1e-12) + 1)
    count = min(count, n_units)
    return count, count / n_units


def difference_dimensionality(
    clean_acts: np.ndarray, perturbed_acts: np.ndarray, threshold: float = 0.95,
) -> Tuple[int, float]:
    """linear_dimensionality of the row-aligned difference clean - perturbed."""
    clean = np.asarray(clean_acts, dtype=np.float64)
    perturbed = np.asarray(perturbed_acts, dtype=np.float64)
    if clean.shape != perturbed.shape:
        raise ShapeError(f"difference matrices need equal shapes, got {clean.shape} and {perturbed.shape}")
    return linear_dimensionality(clean - perturbed, threshold)


def twonn_id(points: np.ndarray, discard_fraction: float = 0.1) -> float:
    """TwoNN intrinsic dimension from second/first nearest-neighbor distance ratios."""
    if not 0.0 <= discard_fraction < 1.0:
        raise ValueError(f"discard_fraction must lie in [0, 1), got {discard_fraction}")
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"twonn_id expects an [n, d] matrix, got {x.shape}")
    unique = np.unique(x, axis=0)
    if unique.shape[0] < TWONN_MIN_POINTS:
        raise DegenerateInputError(
            f"TwoNN needs >= {TWONN_MIN_POINTS} distinct points, got {unique.shape[0]}"
        )
    distances, _ = NearestNeighbors(n_neighbors=3, metric="euclidean").fit(unique).kneighbors(unique)
    mu = np.sort(distances[:, 2] / distances[:, 1])
    n = mu.size
    cdf = np.arange(1, n + 1) / n
    keep = min(int(n * (1.0 - discard_fraction)), n - 1)
    x_fit = np.log(mu[:keep]).reshape(-1, 1)
    y_fit = -np.log(1.0 - cdf[:keep])
    model = LinearRegression(fit_intercept=False).fit(x_fit, y_fit)
    return float(model.coef_[0])


def _safe_twonn(points: np.ndarray, discard_fraction: float) -> float:
    try:
        return twonn_id(points, discard_fraction)
    except SelRobustError as exc:
        logger.warning("TwoNN skipped: %s", exc)
        return float("nan")


@dataclass
class DimensionalityReport:
    mode: str
    thresholds: Tuple[float, ...]
    n_units: Dict[str, int]
    counts: Dict[str, Dict[float, float]] = field(default_factory=dict)
    fractions: Dict[str, Dict[float, float]] = field(default_factory=dict)
    twonn: Dict[str, float] = field(default_factory=dict)

    @property
    def layers(self) -> List[str]:
        return list(self.n_units)

    @property
    def twonn_fraction(self) -> Dict[str, float]:
        return {name: self.twonn[name] / self.n_units[name] for name in self.twonn}

    def rows(self) -> List[Dict[str, object]]:
        out: List[Dict[str, object]] = []
        for layer in self.layers:
            for t in self.thresholds:
                out.append({"layer": layer, "mode": self.mode, "threshold_or_method": f"pca{t:g}",
                            "value": self.fractions[layer][t]})
            out.append({"layer": layer, "mode": self.mode, "threshold_or_method": "twonn",
                        "value": self.twonn_fraction[layer]})
        return out


def _profile_from_matrices(
    mode: str, matrices: Sequence[UnitActivations], thresholds: Sequence[float], discard_fraction: float,
) -> DimensionalityReport:
    """Per-layer PCA and TwoNN statistics averaged over one or more activation sets."""
    thresholds = tuple(sorted(thresholds))
    first = matrices[0]
    report = DimensionalityReport(
        mode=mode, thresholds=thresholds,
        n_units={name: m.shape[1] for name, m in first.items()},
    )
    for layer in first.tap_names:
        counts = {t: [] for t in thresholds}
        ids = []
        for acts in matrices:
            for t in thresholds:
                counts[t].append(linear_dimensionality(acts[layer], t)[0])
            ids.append(_safe_twonn(acts[layer], discard_fraction))
        n_units = report.n_units[layer]
        report.counts[layer] = {t: float(np.mean(counts[t])) for t in thresholds}
        report.fractions[layer] = {t: report.counts[layer][t] / n_units for t in thresholds}
        finite = [v for v in ids if not np.isnan(v)]
        report.twonn[layer] = float(np.mean(finite)) if finite else float("nan")
    return report


def _difference(clean: UnitActivations, perturbed: UnitActivations) -> UnitActivations:
    return UnitActivations({name: clean[name] - perturbed[name] for name in clean.tap_names})


def layerwise_dimensionality_profile(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    source: str = "none",
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    corruption_seed: int = 0,
    corruption_kinds: Sequence[str] = CORRUPTION_KINDS,
    attack: Optional[AttackConfig] = None,
    discard_fraction: float = 0.1,
    batch_size: int = 256,
) -> DimensionalityReport:
    """Clean (``source='none'``) or difference-matrix dimensionality for every tap.

    ``source='corruption'`` averages over every (kind, severity) cell;
    ``source='pgd'`` uses ``attack`` (PGD with 40 steps by default).
    """
    if source not in PERTURBATION_SOURCES:
        raise ValueError(f"source must be one of {PERTURBATION_SOURCES}, got {source!r}")
    for t in thresholds:
        _check_threshold(t)
    _, clean = collect_activations(net, images, batch_size)
    if source == "none":
        return _profile_from_matrices("clean", [clean], thresholds, discard_fraction)
    if source == "corruption":
        diffs = []
        for kind in corruption_kinds:
            for severity in SEVERITIES:
                _, acts = collect_activations(net, corrupt_batch(images, kind, severity, corruption_seed), batch_size)
                diffs.append(_difference(clean, acts))
        logger.debug("dimensionality: %d corruption difference matrices", len(diffs))
        return _profile_from_matrices("difference-average-case", diffs, thresholds, discard_fraction)
    if attack is None:
        attack = AttackConfig.pgd(epsilon=16 / 255, iterations=40)
    adversarial = perturb(net, images, labels, attack, batch_size)
    _, acts = collect_activations(net, adversarial, batch_size)
    return _profile_from_matrices("difference-worst-case", [_difference(clean, acts)], thresholds, discard_fraction)
