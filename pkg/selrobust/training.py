"""Training loop with the selectivity regularizer, checkpoint selection and run records."""

from __future__ import annotations

import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from selrobust.config import ExperimentConfig, TrainSettings, validate_against_schema
from selrobust.data import Splits
from selrobust.errors import (
    ConfigError,
    EmptyClassError,
    NonFiniteError,
    SelRobustError,
    StnsFormatError,
    TrainingDivergedError,
)
from selrobust.models import Network, accuracy, build_network, load_checkpoint, save_checkpoint
from selrobust.persistence import load_json, write_with_meta
from selrobust.selectivity import regularized_loss_terms
from selrobust.tensor import ops
from selrobust.tensor.optim import OptimizerState, sgd_step, step_learning_rate
from selrobust.tensor.rng import STREAM_INIT, STREAM_SHUFFLE, Rng

logger = logging.getLogger(__name__)

RUN_RECORD_NAME = "run-record.json"
RUN_RECORD_SCHEMA = "run-record.schema.json"

PerturbFn = Callable[[Network, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float
    minibatch_si: float
    learning_rate: float


@dataclass
class FitResult:
    history: List[EpochStats]
    best_epoch: int
    checkpoints: List[str] = field(default_factory=list)

    @property
    def best_val_accuracy(self) -> float:
        return self.history[self.best_epoch].val_accuracy


def _nan_for_null(entry: Dict[str, Any]) -> Dict[str, Any]:
    return {k: float("nan") if v is None else v for k, v in entry.items()}


@dataclass
class RunRecord:
    config_hash: str
    alpha: float
    seed: int
    pgd_train_steps: int
    epochs: List[EpochStats]
    best_epoch: int
    best_checkpoint: str
    checkpoints: List[str] = field(default_factory=list)
    cached: bool = False

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("cached")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        return cls(
            config_hash=data["config_hash"],
            alpha=float(data["alpha"]),
            seed=int(data["seed"]),
            pgd_train_steps=int(data["pgd_train_steps"]),
            epochs=[EpochStats(**_nan_for_null(e)) for e in data["epochs"]],
            best_epoch=int(data["best_epoch"]),
            best_checkpoint=data["best_checkpoint"],
            checkpoints=list(data.get("checkpoints", [])),
        )


def _minibatches(n: int, batch_size: int, rng: Rng) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _batch_loss(net: Network, xb: np.ndarray, yb: np.ndarray, alpha: float, eps: float):
    logits, taps = net.forward_with_taps(xb)
    try:
        return regularized_loss_terms(logits, yb, taps, alpha, eps)
    except EmptyClassError:
        logger.warning("minibatch holds fewer than 2 classes; using cross-entropy alone for this step")
        return ops.softmax_cross_entropy(logits, yb), float("nan")


def _nanmean(values: List[float]) -> float:
    finite = [v for v in values if not np.isnan(v)]
    return float(np.mean(finite)) if finite else float("nan")


def fit(
    net: Network,
    splits: Splits,
    settings: TrainSettings,
    alpha: float = 0.0,
    seed: int = 0,
    perturb: Optional[PerturbFn] = None,
    checkpoint_dir: Optional[Path] = None,
) -> FitResult:
    """Train ``net`` in place; on return it holds the best-validation-epoch parameters.

    The loss is cross-entropy minus ``alpha`` times the minibatch selectivity of
    every tap. ``perturb`` replaces each minibatch before the step (PGD training).
    """
    train, val = splits.train, splits.val
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("training needs non-empty train and validation splits")
    state = OptimizerState(
        learning_rate=settings.learning_rate,
        momentum=settings.momentum,
        weight_decay=settings.weight_decay,
    )
    shuffle = Rng(seed).derive(STREAM_SHUFFLE)
    history: List[EpochStats] = []
    snapshots: Dict[int, Dict[str, np.ndarray]] = {}
    checkpoints: List[str] = []

    for epoch in range(settings.epochs):
        state.learning_rate = step_learning_rate(
            settings.learning_rate, settings.anneal_epochs, settings.anneal_factor, epoch,
        )
        losses: List[float] = []
        sis: List[float] = []
        for idx in _minibatches(len(train), settings.batch_size, shuffle.derive(epoch)):
            xb, yb = train.images[idx], train.labels[idx]
            if perturb is not None:
                xb = perturb(net, xb, yb)
            net.train()
            try:
                loss, si = _batch_loss(net, xb, yb, alpha, settings.si_epsilon)
                loss.backward()
                sgd_step(net.parameters(), state)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch} (alpha={alpha}, seed={seed}): {exc}"
                ) from exc
            losses.append(loss.item())
            sis.append(si)
        val_acc = accuracy(net, val.images, val.labels)
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_accuracy=val_acc,
            minibatch_si=_nanmean(sis),
            learning_rate=state.learning_rate,
        )
        history.append(stats)
        logger.debug(
            "epoch %d: loss %.4f val_acc %.4f si %.4f lr %.5f",
            epoch, stats.train_loss, stats.val_accuracy, stats.minibatch_si, stats.learning_rate,
        )
        if checkpoint_dir is not None:
            path = save_checkpoint(net, Path(checkpoint_dir) / f"epoch-{epoch:03d}", extra={"epoch": epoch})
            checkpoints.append(str(path))
        else:
            snapshots[epoch] = net.state()

    best = int(np.argmax([s.val_accuracy for s in history]))
    if checkpoint_dir is not None:
        net.load_state(load_checkpoint(checkpoints[best]).state())
    else:
        net.load_state(snapshots[best])
    net.eval()
    logger.debug("best epoch %d (val accuracy %.4f)", best, history[best].val_accuracy)
    return FitResult(history=history, best_epoch=best, checkpoints=checkpoints)


def load_run_record(run_dir: Path) -> Optional[RunRecord]:
    """The persisted record, or ``None`` when it is missing or fails schema validation."""
    path = Path(run_dir) / RUN_RECORD_NAME
    if not path.is_file():
        return None
    try:
        data = load_json(path)
        validate_against_schema(data, RUN_RECORD_SCHEMA)
    except (ValueError, OSError, SelRobustError) as exc:
        logger.warning("Ignoring unusable run record %s: %s", path, exc)
        return None
    return RunRecord.from_dict(data)


def _cached_record(run_dir: Path, config_hash: str) -> Optional[RunRecord]:
    record = load_run_record(run_dir)
    if record is None:
        return None
    if record.config_hash != config_hash:
        logger.debug("cache miss in %s: config hash changed", run_dir)
        return None
    try:
        load_checkpoint(record.best_checkpoint)
    except (SelRobustError, OSError) as exc:
        logger.warning("cache miss in %s: best checkpoint unreadable (%s)", run_dir, exc)
        return None
    record.cached = True
    return record


def _prune(checkpoints: List[str], keep: str) -> List[str]:
    for path in checkpoints:
        if path != keep:
            shutil.rmtree(path, ignore_errors=True)
    return [keep]


def train(
    config: ExperimentConfig,
    alpha: float,
    seed: int,
    splits: Splits,
    run_dir: Path,
    pgd_train_steps: int = 0,
) -> RunRecord:
    """Train one (alpha, seed) model, reusing the cached run when the config hash matches."""
    run_dir = Path(run_dir)
    config_hash = config.config_hash(alpha, seed, pgd_train_steps)
    cached = _cached_record(run_dir, config_hash)
    if cached is not None:
        logger.info("Reusing cached run alpha=%s seed=%d from %s", alpha, seed, run_dir)
        return cached

    settings = config.train
    net = build_network(config.network_spec(), Rng(seed).derive(STREAM_INIT))
    checkpoint_dir = run_dir / "checkpoints"
    if checkpoint_dir.exists():
        shutil.rmtree(checkpoint_dir)
    if pgd_train_steps:
        from selrobust.attacks import AttackConfig, pgd_train

        attack = AttackConfig.pgd(
            epsilon=config.attack.pgd_epsilon,
            iterations=pgd_train_steps,
            step_size=config.attack.step_size,
            step_fraction=config.attack.step_fraction,
        )
        result = pgd_train(net, splits, attack, settings, seed, alpha=alpha, checkpoint_dir=checkpoint_dir)
    else:
        result = fit(net, splits, settings, alpha=alpha, seed=seed, checkpoint_dir=checkpoint_dir)

    best_checkpoint = result.checkpoints[result.best_epoch]
    checkpoints = result.checkpoints
    if not settings.keep_all_checkpoints:
        checkpoints = _prune(checkpoints, best_checkpoint)
    record = RunRecord(
        config_hash=config_hash,
        alpha=float(alpha),
        seed=int(seed),
        pgd_train_steps=int(pgd_train_steps),
        epochs=result.history,
        best_epoch=result.best_epoch,
        best_checkpoint=best_checkpoint,
        checkpoints=checkpoints,
    )
    write_with_meta("run-record", record.to_dict(), run_dir / RUN_RECORD_NAME, config_hash=config_hash)
    logger.info(
        "Trained alpha=%s seed=%d: best epoch %d, val accuracy %.4f",
        alpha, seed, result.best_epoch, result.best_val_accuracy,
    )
    return record


def load_trained(record: RunRecord) -> Network:
    try:
        return load_checkpoint(record.best_checkpoint)
    except FileNotFoundError as exc:
        raise StnsFormatError(f"checkpoint missing: {record.best_checkpoint}") from exc
