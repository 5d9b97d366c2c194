"""Class selectivity index, its layerwise aggregation, and the regularized loss.

For one unit with class-conditional means m_1..m_C:

    SI = (m_max - m_rest) / (m_max + m_rest + eps)

where m_rest is the mean of the C-1 non-maximal class means. The network
score averages SI within each layer first, then across layers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from selrobust.errors import DegenerateInputError, EmptyClassError
from selrobust.models import Network, UnitActivations, collect_activations, dead_units
from selrobust.tensor import ops
from selrobust.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SI_EPSILON = 1e-6


@dataclass
class ClassConditionalMeans:
    means: Dict[str, np.ndarray]
    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])


def class_conditional_means(
    acts: UnitActivations, labels: Sequence[int], n_classes: Optional[int] = None,
) -> ClassConditionalMeans:
    """Entry (c, u) is the mean activation of unit u over the samples of class c."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (acts.n_samples,):
        raise DegenerateInputError(
            f"{labels.shape[0]} labels for {acts.n_samples} activation rows"
        )
    if labels.size and labels.min() < 0:
        raise EmptyClassError("labels must be non-negative")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=n_classes)[:n_classes] if labels.size else np.zeros(n_classes, int)
    if labels.size and labels.max() >= n_classes:
        raise EmptyClassError(f"label {labels.max()} outside [0, {n_classes})")
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyClassError(f"class(es) {empty.tolist()} have no samples")
    onehot = np.zeros((n_classes, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    onehot /= counts[:, None]
    means = {name: onehot @ matrix for name, matrix in acts.items()}
    return ClassConditionalMeans(means=means, counts=counts)


def selectivity_index(class_means: Sequence[float], eps: float = SI_EPSILON) -> float:
    """SI of one unit from its C >= 2 class-conditional means."""
    row = np.asarray(class_means, dtype=np.float64)
    if row.ndim != 1 or row.size < 2:
        raise DegenerateInputError(f"selectivity needs >= 2 class means, got shape {row.shape}")
    if np.any(row < 0):
        raise ValueError("class-conditional means must be non-negative")
    top = row.max()
    rest = (row.sum() - top) / (row.size - 1)
    denom = top + rest + eps
    if denom == 0.0:
        return 0.0
    return float((top - rest) / denom)


def selectivity_indices(means: np.ndarray, eps: float = SI_EPSILON) -> np.ndarray:
    """Vectorized SI for a ``[n_classes, n_units]`` matrix; one value per unit."""
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise DegenerateInputError(f"selectivity needs [>=2 classes, units], got {means.shape}")
    if np.any(means < 0):
        raise ValueError("class-conditional means must be non-negative")
    top = means.max(axis=0)
    rest = (means.sum(axis=0) - top) / (means.shape[0] - 1)
    denom = top + rest + eps
    out = np.zeros_like(top)
    np.divide(top - rest, denom, out=out, where=denom != 0)
    return out


def mean_selectivity(by_layer: Dict[str, Sequence[float]]) -> Tuple[Dict[str, float], float]:
    """Per-layer means and the mean of those means."""
    if not by_layer:
        raise DegenerateInputError("mean_selectivity needs at least one layer")
    layer_means = {}
    for name, values in by_layer.items():
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            raise DegenerateInputError(f"layer {name} has no units")
        layer_means[name] = float(arr.mean())
    return layer_means, float(np.mean(list(layer_means.values())))


def minibatch_selectivity(
    taps: Dict[str, Tensor], labels: Sequence[int], eps: float = SI_EPSILON,
) -> Tensor:
    """Differentiable network SI over the classes present in a minibatch."""
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise EmptyClassError(f"minibatch contains {present.size} class(es); selectivity needs >= 2")
    if not taps:
        raise DegenerateInputError("no activation taps to regularize")
    averaging = np.zeros((present.size, labels.size))
    for row, cls in enumerate(present):
        members = labels == cls
        averaging[row, members] = 1.0 / members.sum()
    averaging_t = Tensor(averaging)
    layer_terms: List[Tensor] = []
    for acts in taps.values():
        means = ops.matmul(averaging_t, acts)
        top = ops.reduce_max(means, axis=0)
        rest = ops.scalar_mul(ops.sub(ops.reduce_sum(means, axis=0), top), 1.0 / (present.size - 1))
        si = ops.div(ops.sub(top, rest), ops.add(ops.add(top, rest), eps))
        layer_terms.append(ops.reduce_mean(si))
    total = layer_terms[0]
    for term in layer_terms[1:]:
        total = ops.add(total, term)
    return ops.scalar_mul(total, 1.0 / len(layer_terms))


def regularized_loss_terms(
    logits: Tensor,
    labels: Sequence[int],
    taps: Dict[str, Tensor],
    alpha: float,
    eps: float = SI_EPSILON,
) -> Tuple[Tensor, float]:
    """(cross-entropy - alpha * minibatch SI, minibatch SI value).

    With ``alpha == 0`` the loss is the plain cross-entropy tensor and the SI
    value is computed off-graph (NaN if the batch holds fewer than 2 classes).
    """
    ce = ops.softmax_cross_entropy(logits, labels)
    if alpha == 0:
        with no_grad():
            try:
                si_value = minibatch_selectivity(taps, labels, eps).item()
            except EmptyClassError:
                si_value = float("nan")
        return ce, si_value
    si = minibatch_selectivity(taps, labels, eps)
    return ops.sub(ce, ops.scalar_mul(si, alpha)), si.item()


def regularized_loss(
    logits: Tensor,
    labels: Sequence[int],
    taps: Dict[str, Tensor],
    alpha: float,
    eps: float = SI_EPSILON,
) -> Tensor:
    return regularized_loss_terms(logits, labels, taps, alpha, eps)[0]


@dataclass
class SelectivityReport:
    unit_si: Dict[str, np.ndarray]
    layer_means: Dict[str, float]
    mean_si: float
    dead_masks: Dict[str, np.ndarray]
    layer_means_alive: Dict[str, float]
    mean_si_alive: float
    alpha: Optional[float] = None
    eps: float = SI_EPSILON
    dead_threshold: float = 0.0
    dead_proportions: Dict[str, float] = field(default_factory=dict)

    def rows(self) -> List[Dict[str, object]]:
        out = []
        for layer, values in self.unit_si.items():
            mask = self.dead_masks[layer]
            for unit, si in enumerate(values):
                out.append({"layer": layer, "unit": unit, "si": float(si), "dead": int(mask[unit])})
        return out

    def summary(self) -> Dict[str, object]:
        return {
            "alpha": self.alpha,
            "eps": self.eps,
            "dead_threshold": self.dead_threshold,
            "mean_si": self.mean_si,
            "mean_si_alive": self.mean_si_alive,
            "layer_means": self.layer_means,
            "layer_means_alive": self.layer_means_alive,
            "dead_proportions": self.dead_proportions,
        }


def selectivity_from_activations(
    acts: UnitActivations,
    labels: Sequence[int],
    n_classes: int,
    alpha: Optional[float] = None,
    dead_threshold: float = 0.0,
    eps: float = SI_EPSILON,
) -> SelectivityReport:
    ccm = class_conditional_means(acts, labels, n_classes)
    unit_si = {name: selectivity_indices(means, eps) for name, means in ccm.means.items()}
    layer_means, mean_si = mean_selectivity(unit_si)
    dead = dead_units(acts, dead_threshold)
    alive = {}
    for name, values in unit_si.items():
        kept = values[~dead.masks[name]]
        # a layer with every unit dead contributes its (zero) full mean
        alive[name] = kept if kept.size else values
    layer_means_alive, mean_si_alive = mean_selectivity(alive)
    return SelectivityReport(
        unit_si=unit_si,
        layer_means=layer_means,
        mean_si=mean_si,
        dead_masks=dead.masks,
        layer_means_alive=layer_means_alive,
        mean_si_alive=mean_si_alive,
        alpha=alpha,
        eps=eps,
        dead_threshold=dead_threshold,
        dead_proportions=dead.proportions,
    )


def selectivity_report(
    net: Network,
    images: np.ndarray,
    labels: Sequence[int],
    alpha: Optional[float] = None,
    dead_threshold: float = 0.0,
    eps: float = SI_EPSILON,
    batch_size: int = 256,
) -> SelectivityReport:
    """Full-dataset selectivity in evaluation mode."""
    if len(images) == 0:
        raise DegenerateInputError("selectivity_report needs a non-empty dataset")
    _, acts = collect_activations(net, images, batch_size)
    report = selectivity_from_activations(
        acts, labels, net.spec.n_classes, alpha=alpha, dead_threshold=dead_threshold, eps=eps,
    )
    logger.debug("selectivity_report: mean SI %.4f (alive %.4f)", report.mean_si, report.mean_si_alive)
    return report
