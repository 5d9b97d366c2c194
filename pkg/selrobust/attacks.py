"""Worst-case perturbations (FGSM, PGD), PGD training, transfer evaluation,
and input-gradient stability measures.

Attack gradients always come from the unregularized cross-entropy with the
network in evaluation mode and its parameters frozen.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from selrobust.errors import NonFiniteError, ShapeError
from selrobust.models import Network, accuracy
from selrobust.tensor import ops
from selrobust.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "pgd")
DEFAULT_BATCH = 256


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 16 / 255
    step_size: Optional[float] = None
    iterations: int = 0
    bounds: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind == "pgd":
            if self.step_size is None or not self.step_size > 0:
                raise ValueError(f"PGD needs step_size > 0, got {self.step_size}")
            if self.iterations < 0:
                raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError(f"pixel bounds must satisfy lo < hi, got {self.bounds}")

    @classmethod
    def pgd(cls, epsilon: float, iterations: int, step_size: Optional[float] = None,
            step_fraction: float = 0.1) -> "AttackConfig":
        """PGD config; the step defaults to ``step_fraction * epsilon``."""
        if step_size is None:
            step_size = step_fraction * epsilon if epsilon > 0 else step_fraction
        return cls(kind="pgd", epsilon=epsilon, step_size=step_size, iterations=iterations)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["bounds"] = list(self.bounds)
        return data


@dataclass
class AttackResult:
    perturbed: np.ndarray
    clean_accuracy: float
    adversarial_accuracy: float
    loss_before: np.ndarray
    loss_after: np.ndarray
    config: AttackConfig

    def summary(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "clean_accuracy": self.clean_accuracy,
            "adversarial_accuracy": self.adversarial_accuracy,
            "mean_loss_before": float(self.loss_before.mean()),
            "mean_loss_after": float(self.loss_after.mean()),
        }


def loss_and_input_gradient(net: Network, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient with respect to ``x``."""
    with net.evaluating(), net.frozen():
        probe = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
        losses = ops.softmax_cross_entropy(net(probe), y, reduction="none")
        ops.reduce_sum(losses).backward()
    grad = probe.grad
    if grad is None or not np.all(np.isfinite(grad)):
        raise NonFiniteError("input gradient is missing or non-finite")
    return losses.data.copy(), grad


def per_sample_loss(net: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with net.evaluating(), no_grad():
        return ops.softmax_cross_entropy(net(x), y, reduction="none").data.copy()


def _batched(fn: Callable[[np.ndarray, np.ndarray], np.ndarray], x: np.ndarray, y: np.ndarray,
             batch_size: int) -> np.ndarray:
    parts = [fn(x[i:i + batch_size], y[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts, axis=0)


def _fgsm_batch(net: Network, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> np.ndarray:
    lo, hi = config.bounds
    _, grad = loss_and_input_gradient(net, x, y)
    return np.clip(x + config.epsilon * np.sign(grad), lo, hi)


def _pgd_batch(net: Network, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> np.ndarray:
    lo, hi = config.bounds
    lower, upper = x - config.epsilon, x + config.epsilon
    current = x.copy()
    for step in range(config.iterations):
        _, grad = loss_and_input_gradient(net, current, y)
        current = np.clip(np.clip(current + config.step_size * np.sign(grad), lower, upper), lo, hi)
        logger.debug("pgd step %d/%d", step + 1, config.iterations)
    return current


def perturb(net: Network, x: np.ndarray, y: np.ndarray, config: AttackConfig,
            batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Adversarial version of ``x`` under ``config`` (no accuracy bookkeeping)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} images but {len(y)} labels")
    lo, hi = config.bounds
    if x.size and (x.min() < lo or x.max() > hi):
        raise ValueError(f"inputs must lie within pixel bounds {config.bounds}")
    if config.kind == "fgsm":
        return _batched(lambda a, b: _fgsm_batch(net, a, b, config), x, y, batch_size)
    return _batched(lambda a, b: _pgd_batch(net, a, b, config), x, y, batch_size)


def _attack(net: Network, x: np.ndarray, y: np.ndarray, config: AttackConfig,
            batch_size: int) -> AttackResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    adversarial = perturb(net, x, y, config, batch_size)
    result = AttackResult(
        perturbed=adversarial,
        clean_accuracy=accuracy(net, x, y, batch_size),
        adversarial_accuracy=accuracy(net, adversarial, y, batch_size),
        loss_before=_batched(lambda a, b: per_sample_loss(net, a, b), x, y, batch_size),
        loss_after=_batched(lambda a, b: per_sample_loss(net, a, b), adversarial, y, batch_size),
        config=config,
    )
    logger.info(
        "%s eps=%.5f iters=%d: accuracy %.4f -> %.4f", config.kind, config.epsilon,
        config.iterations, result.clean_accuracy, result.adversarial_accuracy,
    )
    return result


def fgsm(net: Network, x: np.ndarray, y: np.ndarray, config: AttackConfig,
         batch_size: int = DEFAULT_BATCH) -> AttackResult:
    """x' = clip(x + eps * sign(grad_x CE), bounds)."""
    if config.kind != "fgsm":
        config = AttackConfig(kind="fgsm", epsilon=config.epsilon, bounds=config.bounds)
    return _attack(net, x, y, config, batch_size)


def pgd(net: Network, x: np.ndarray, y: np.ndarray, config: AttackConfig,
        batch_size: int = DEFAULT_BATCH) -> AttackResult:
    """Iterated FGSM from x (no random start), projected onto the eps-ball and pixel range."""
    if config.kind != "pgd":
        raise ValueError("pgd() needs an AttackConfig with kind='pgd'")
    return _attack(net, x, y, config, batch_size)


def pgd_train(net: Network, splits: Any, config: AttackConfig, settings: Any, seed: int,
              alpha: float = 0.0, checkpoint_dir: Any = None) -> Any:
    """Train with every minibatch replaced by its PGD perturbation under current parameters."""
    from selrobust.training import fit

    def _perturb(model: Network, xb: np.ndarray, yb: np.ndarray) -> np.ndarray:
        if config.iterations == 0:
            return xb
        return perturb(model, xb, yb, config, batch_size=len(xb))

    logger.debug("pgd_train: eps=%.5f iterations=%d", config.epsilon, config.iterations)
    return fit(net, splits, settings, alpha=alpha, seed=seed, perturb=_perturb, checkpoint_dir=checkpoint_dir)


def transfer_eval(source_net: Network, target_net: Network, x: np.ndarray, y: np.ndarray,
                  config: AttackConfig, batch_size: int = DEFAULT_BATCH) -> float:
    """Accuracy of ``target_net`` on adversarial examples crafted against ``source_net``."""
    if source_net.spec.input_shape != target_net.spec.input_shape:
        raise ShapeError("source and target networks take different input shapes")
    if source_net.spec.n_classes != target_net.spec.n_classes:
        raise ShapeError("source and target networks predict different class counts")
    adversarial = perturb(source_net, x, y, config, batch_size)
    return accuracy(target_net, adversarial, y, batch_size)


@dataclass
class JacobianReport:
    per_sample: np.ndarray
    mean: float
    norm: str


def input_output_jacobian(net: Network, x: np.ndarray) -> np.ndarray:
    """Exact ``[N, n_classes, input_dim]`` Jacobian, one retained backward pass per logit."""
    x = np.asarray(x, dtype=np.float64)
    n_classes = net.spec.n_classes
    with net.evaluating(), net.frozen():
        probe = Tensor(x, requires_grad=True)
        logits = net(probe)
        rows = []
        for k in range(n_classes):
            selector = np.zeros((n_classes, 1))
            selector[k, 0] = 1.0
            probe.grad = None
            ops.reduce_sum(ops.matmul(logits, selector)).backward(retain_graph=k < n_classes - 1)
            rows.append(probe.grad.reshape(len(x), -1))
    jac = np.stack(rows, axis=1)
    if not np.all(np.isfinite(jac)):
        raise NonFiniteError("Jacobian has non-finite entries")
    return jac


def jacobian_norm(net: Network, x: np.ndarray, spectral: bool = False,
                  batch_size: int = 64) -> JacobianReport:
    """Per-sample Frobenius (or spectral) norm of d logits / d input, and the mean."""
    x = np.asarray(x, dtype=np.float64)
    norms = []
    for start in range(0, len(x), batch_size):
        jac = input_output_jacobian(net, x[start:start + batch_size])
        if spectral:
            norms.append(np.array([np.linalg.norm(j, 2) for j in jac]))
        else:
            norms.append(np.sqrt((jac**2).sum(axis=(1, 2))))
    per_sample = np.concatenate(norms)
    return JacobianReport(per_sample=per_sample, mean=float(per_sample.mean()),
                          norm="spectral" if spectral else "frobenius")


def input_unit_gradient_norms(net: Network, x: np.ndarray, tap: str, batch_size: int = 64) -> np.ndarray:
    """``[samples, units]`` l2 norms of d(unit activation)/d(input)."""
    x = np.asarray(x, dtype=np.float64)
    if tap not in net.spec.tap_names:
        raise ShapeError(f"unknown tap {tap!r}; available: {', '.join(net.spec.tap_names)}")
    blocks = []
    for start in range(0, len(x), batch_size):
        chunk = x[start:start + batch_size]
        with net.evaluating(), net.frozen():
            probe = Tensor(chunk, requires_grad=True)
            _, taps = net.forward_with_taps(probe)
            acts = taps[tap]
            n_units = acts.shape[1]
            norms = np.zeros((len(chunk), n_units))
            for u in range(n_units):
                selector = np.zeros((n_units, 1))
                selector[u, 0] = 1.0
                probe.grad = None
                ops.reduce_sum(ops.matmul(acts, selector)).backward(retain_graph=u < n_units - 1)
                norms[:, u] = np.linalg.norm(probe.grad.reshape(len(chunk), -1), axis=1)
        blocks.append(norms)
    result = np.concatenate(blocks, axis=0)
    if not np.all(np.isfinite(result)):
        raise NonFiniteError(f"input-unit gradients for tap {tap} are non-finite")
    return result
