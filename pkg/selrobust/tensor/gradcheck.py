"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from selrobust.errors import NonFiniteError, ShapeError
from selrobust.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    analytic: np.ndarray
    numeric: np.ndarray


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ShapeError(f"finite_difference_check needs a scalar function, got shape {value.shape}")
    result = value.item()
    if not np.isfinite(result):
        raise NonFiniteError("f(x) is not finite")
    return result


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    step: float = 1e-6,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare the autodiff gradient of ``f`` at ``x`` with central differences.

    The discrepancy per entry is ``|a - n| / max(|a|, |n|, 1)``.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    _scalar(out)
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            shifted = base.copy().reshape(-1)
            shifted[i] += step
            upper = _scalar(f(Tensor(shifted.reshape(base.shape))))
            shifted[i] -= 2 * step
            lower = _scalar(f(Tensor(shifted.reshape(base.shape))))
            flat[i] = (upper - lower) / (2 * step)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / scale
    max_rel = float(rel.max()) if rel.size else 0.0
    logger.debug("finite_difference_check: %d entries, max rel error %.3g", base.size, max_rel)
    return GradCheckReport(
        max_rel_error=max_rel, passed=max_rel <= tol, tolerance=tol,
        analytic=analytic, numeric=numeric,
    )
