"""SGD with momentum and weight decay, plus the step learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence

import numpy as np

from selrobust.errors import MissingGradientError, NonFiniteError, ShapeError
from selrobust.tensor.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState) -> None:
    """v <- m*v + (g + wd*p); p <- p - lr*v; then clear gradients."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for parameter(s): {', '.join(missing)}")

    lr, momentum, decay = state.learning_rate, state.momentum, state.weight_decay
    for name, param in params.items():
        grad = param.grad + decay * param.data
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        elif velocity.shape != param.data.shape:
            raise ShapeError(f"velocity for {name} has shape {velocity.shape}, parameter {param.shape}")
        velocity = momentum * velocity + grad
        updated = param.data - lr * velocity
        if not np.all(np.isfinite(updated)):
            raise NonFiniteError(f"sgd_step produced non-finite values for {name}")
        state.velocity[name] = velocity
        param.data = updated
        param.grad = None


def step_learning_rate(initial: float, anneal_epochs: Sequence[int], factor: float, epoch: int) -> float:
    """Learning rate for ``epoch`` (0-based): multiplied by ``factor`` at every anneal epoch reached."""
    passed = sum(1 for boundary in anneal_epochs if epoch >= boundary)
    return initial * factor**passed
