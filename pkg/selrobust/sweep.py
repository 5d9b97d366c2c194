"""Alpha sweeps: train every (alpha, seed) cell, run the metric battery, consolidate.

Each cell writes ``measurements.json`` under its run directory; a failed cell
is recorded in ``sweep-status.json`` and skipped. Consolidation always sorts
by (pgd_train_steps, alpha, seed), so outputs do not depend on completion order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from selrobust.analysis import gradient_cv, layerwise_dimensionality_profile
from selrobust.attacks import AttackConfig, fgsm, input_unit_gradient_norms, jacobian_norm, perturb, pgd
from selrobust.config import ExperimentConfig
from selrobust.corruptions import corruption_suite_eval, normalized_accuracy
from selrobust.data import Dataset, Splits, generate_synthetic_dataset, load_dataset, save_dataset
from selrobust.errors import ConfigError, DegenerateInputError, FloorEffectError, SelRobustError
from selrobust.models import Network, accuracy
from selrobust.persistence import load_json, write_with_meta
from selrobust.selectivity import selectivity_report
from selrobust.training import RunRecord, load_trained, train

logger = logging.getLogger(__name__)

MEASUREMENTS_NAME = "measurements.json"
TRANSFER_NAME = "transfer.json"
STATUS_NAME = "sweep-status.json"

Rows = List[Dict[str, Any]]


@dataclass(frozen=True, order=True)
class Cell:
    pgd_train_steps: int
    alpha: float
    seed: int

    @property
    def name(self) -> str:
        base = f"alpha={self.alpha!r}_seed={self.seed}"
        return f"{base}_pgd={self.pgd_train_steps}" if self.pgd_train_steps else base

    def key(self) -> Dict[str, Any]:
        return {"alpha": self.alpha, "seed": self.seed, "pgd_train_steps": self.pgd_train_steps}


@dataclass
class CellOutcome:
    cell: Cell
    status: str
    run_dir: str
    error: str = ""
    cached: bool = False

    def to_dict(self) -> Dict[str, Any]:
        data = self.cell.key()
        data.update({"status": self.status, "run_dir": self.run_dir, "error": self.error, "cached": self.cached})
        return data


@dataclass
class SweepResult:
    root: Path
    outcomes: List[CellOutcome]
    report_files: List[Path] = field(default_factory=list)

    @property
    def failed(self) -> List[CellOutcome]:
        return [o for o in self.outcomes if o.status != "ok"]


def sweep_cells(config: ExperimentConfig) -> List[Cell]:
    """Every (alpha, seed) cell plus the PGD-training cells, sorted."""
    cells = {Cell(0, float(a), int(s)) for a in config.alphas for s in config.seeds}
    for steps in config.train.pgd_train_steps:
        for s in config.seeds:
            cells.add(Cell(int(steps), float(config.train.pgd_train_alpha), int(s)))
    return sorted(cells)


def cell_dir(root: Path, cell: Cell) -> Path:
    return Path(root) / "runs" / cell.name


def prepare_splits(config: ExperimentConfig, root: Optional[Path] = None) -> Splits:
    """Load ``data.path`` or generate the synthetic dataset (persisted under ``root/data``)."""
    if config.data.path:
        splits = load_dataset(config.data.path)
    else:
        d = config.data
        splits = generate_synthetic_dataset(
            d.seed, d.n_classes, d.train_per_class, d.val_per_class, d.test_per_class, d.image_size, d.noise,
        )
        if root is not None:
            save_dataset(splits, Path(root) / "data", meta=asdict(d))
    shape = tuple(splits.train.images.shape[1:])
    if shape != config.input_shape:
        raise ConfigError(f"dataset images are {shape} but the config expects {config.input_shape}")
    if splits.train.n_classes > config.data.n_classes:
        raise ConfigError(f"dataset has {splits.train.n_classes} classes, config says {config.data.n_classes}")
    return splits


def measure_accuracy(net: Network, splits: Splits, record: Optional[RunRecord] = None) -> Rows:
    rows = [{"split": "test", "accuracy": accuracy(net, splits.test.images, splits.test.labels)}]
    if record is not None:
        rows.append({"split": "val_best", "accuracy": record.epochs[record.best_epoch].val_accuracy})
    return rows


def measure_selectivity(net: Network, data: Dataset, config: ExperimentConfig,
                        alpha: Optional[float] = None) -> Tuple[Rows, Rows]:
    """(per-layer rows with a ``network`` summary row, per-unit rows)."""
    report = selectivity_report(
        net, data.images, data.labels, alpha=alpha,
        dead_threshold=config.analysis.dead_threshold, eps=config.train.si_epsilon,
    )
    layers = [
        {
            "layer": name,
            "mean_si": report.layer_means[name],
            "mean_si_alive": report.layer_means_alive[name],
            "dead_proportion": report.dead_proportions[name],
        }
        for name in report.unit_si
    ]
    total_units = sum(m.size for m in report.dead_masks.values())
    layers.append({
        "layer": "network",
        "mean_si": report.mean_si,
        "mean_si_alive": report.mean_si_alive,
        "dead_proportion": float(sum(m.sum() for m in report.dead_masks.values()) / total_units),
    })
    return layers, report.rows()


def measure_corruption(net: Network, data: Dataset, config: ExperimentConfig) -> Tuple[Rows, Rows]:
    suite = corruption_suite_eval(
        net, data.images, data.labels, seeds=config.corruption.seeds, kinds=config.corruption.kinds,
    )
    summary = [
        {"statistic": "clean_accuracy", "value": suite.clean_accuracy},
        {"statistic": "grand_mean", "value": suite.grand_mean},
        {"statistic": "identity_accuracy", "value": suite.identity_accuracy},
    ]
    try:
        summary.append({"statistic": "normalized_accuracy", "value": normalized_accuracy(suite)})
    except FloorEffectError as exc:
        logger.warning("normalized corrupted accuracy undefined: %s", exc)
        summary.append({"statistic": "normalized_accuracy", "value": None})
    for severity, value in suite.severity_means.items():
        summary.append({"statistic": f"severity_{severity}_mean", "value": value})
    return suite.rows(), summary


def measure_fgsm(net: Network, data: Dataset, config: ExperimentConfig) -> Rows:
    rows = []
    for eps in config.attack.fgsm_epsilons:
        result = fgsm(net, data.images, data.labels, AttackConfig(kind="fgsm", epsilon=eps))
        rows.append({
            "epsilon": eps,
            "accuracy": result.adversarial_accuracy,
            "mean_loss_before": float(result.loss_before.mean()),
            "mean_loss_after": float(result.loss_after.mean()),
        })
    return rows


def pgd_config(config: ExperimentConfig, steps: int) -> AttackConfig:
    eps = config.attack.pgd_epsilon
    return AttackConfig.pgd(
        epsilon=eps, iterations=steps,
        step_size=config.attack.step_size, step_fraction=config.attack.step_fraction,
    )


def measure_pgd(net: Network, data: Dataset, config: ExperimentConfig) -> Rows:
    rows = []
    for steps in config.attack.pgd_steps:
        attack = pgd_config(config, steps)
        result = pgd(net, data.images, data.labels, attack)
        rows.append({
            "epsilon": attack.epsilon,
            "steps": steps,
            "step_size": attack.step_size,
            "step_rule": config.attack.step_rule,
            "accuracy": result.adversarial_accuracy,
        })
    return rows


def measure_jacobian(net: Network, data: Dataset, config: ExperimentConfig) -> Rows:
    """Jacobian norm averaged over every sample of ``data``."""
    report = jacobian_norm(net, data.images, spectral=config.analysis.spectral)
    return [{"norm": report.norm, "mean": report.mean, "samples": len(data)}]


def measure_gradients(net: Network, data: Dataset, config: ExperimentConfig) -> Tuple[Rows, Rows]:
    """Per-layer (mu_l, sigma_l, CV_l, mean CV_u) rows and per-unit (mu_u, sigma_u, CV_u) rows."""
    sample = data.subset(config.analysis.gradient_samples)
    layers, units = [], []
    for tap in net.spec.tap_names:
        norms = input_unit_gradient_norms(net, sample.images, tap)
        try:
            stats = gradient_cv(norms)
        except DegenerateInputError as exc:
            logger.warning("gradient CV skipped for %s: %s", tap, exc)
            layers.append({"layer": tap, "mu_l": None, "sigma_l": None, "cv_l": None, "mean_cv_u": None})
            continue
        layers.append({
            "layer": tap, "mu_l": stats.mu_l, "sigma_l": stats.sigma_l,
            "cv_l": stats.cv_l, "mean_cv_u": stats.mean_cv_u,
        })
        for u in range(stats.mu_u.size):
            units.append({
                "layer": tap, "unit": u, "mu_u": float(stats.mu_u[u]),
                "sigma_u": float(stats.sigma_u[u]), "cv_u": float(stats.cv_u[u]),
            })
    return layers, units


def measure_dimensionality(net: Network, data: Dataset, config: ExperimentConfig,
                           sources: Sequence[str] = ("none", "corruption", "pgd")) -> Rows:
    rows: Rows = []
    for source in sources:
        profile = layerwise_dimensionality_profile(
            net, data.images, data.labels, source=source,
            thresholds=config.analysis.thresholds,
            corruption_seed=config.corruption.seeds[0],
            corruption_kinds=config.corruption.kinds,
            attack=pgd_config(config, config.analysis.dimensionality_pgd_steps),
            discard_fraction=config.analysis.twonn_discard,
        )
        rows.extend(profile.rows())
    return rows


def training_rows(record: RunRecord) -> Rows:
    return [
        {
            "epoch": e.epoch, "train_loss": e.train_loss, "val_accuracy": e.val_accuracy,
            "minibatch_si": e.minibatch_si, "learning_rate": e.learning_rate,
            "best": int(e.epoch == record.best_epoch),
        }
        for e in record.epochs
    ]


def evaluate_cell(net: Network, splits: Splits, config: ExperimentConfig,
                  record: RunRecord) -> Dict[str, Rows]:
    """The full metric battery on the test split, keyed by metric family."""
    test = splits.test
    a = config.analysis
    families: Dict[str, Rows] = {
        "accuracy": measure_accuracy(net, splits, record),
        "training": training_rows(record),
    }
    if a.selectivity:
        families["selectivity"], families["units"] = measure_selectivity(net, test, config, alpha=record.alpha)
        if Cell(record.pgd_train_steps, record.alpha, record.seed) in _pgd_group(config):
            net_row = families["selectivity"][-1]
            families["pgd_training"] = [{
                "mean_si": net_row["mean_si"],
                "mean_si_alive": net_row["mean_si_alive"],
                "dead_proportion": net_row["dead_proportion"],
            }]
    if config.corruption.enabled:
        families["corruption"], families["corruption_summary"] = measure_corruption(net, test, config)
    families["fgsm"] = measure_fgsm(net, test, config)
    families["pgd"] = measure_pgd(net, test, config)
    if a.jacobian:
        families["jacobian"] = measure_jacobian(net, test, config)
    if a.gradients:
        families["gradient_cv"], families["gradient_units"] = measure_gradients(net, test, config)
    if a.dimensionality:
        sources = ("none", "corruption", "pgd") if config.corruption.enabled else ("none", "pgd")
        families["dimensionality"] = measure_dimensionality(net, test, config, sources)
    return families


def _pgd_group(config: ExperimentConfig) -> set:
    return {
        Cell(int(steps), float(config.train.pgd_train_alpha), int(s))
        for steps in config.train.pgd_train_steps for s in config.seeds
    }


def run_cell(config: ExperimentConfig, splits: Splits, root: Path, cell: Cell) -> CellOutcome:
    """Train (or reuse) and measure one cell; errors become a failed outcome."""
    run_dir = cell_dir(root, cell)
    logger.debug("cell %s starting", cell.name)
    try:
        record = train(config, cell.alpha, cell.seed, splits, run_dir, pgd_train_steps=cell.pgd_train_steps)
        measurements_path = run_dir / MEASUREMENTS_NAME
        if record.cached and _measurements_current(measurements_path, record.config_hash):
            logger.debug("cell %s: measurements reused", cell.name)
        else:
            families = evaluate_cell(load_trained(record), splits, config, record)
            write_with_meta(
                "measurements", {"cell": cell.key(), "settings": _measurement_settings(config), "families": families},
                measurements_path, config_hash=record.config_hash,
            )
    except (SelRobustError, ArithmeticError, ValueError, OSError) as exc:
        logger.error("Cell %s failed: %s. Hint: see %s and rerun the sweep; finished cells are cached.",
                     cell.name, exc, run_dir)
        return CellOutcome(cell=cell, status="failed", run_dir=str(run_dir), error=str(exc))
    return CellOutcome(cell=cell, status="ok", run_dir=str(run_dir), cached=record.cached)


def _measurements_current(path: Path, config_hash: str) -> bool:
    if not path.is_file():
        return False
    try:
        return load_json(path).get("config_hash") == config_hash
    except (ValueError, OSError):
        return False


def _measurement_settings(config: ExperimentConfig) -> Dict[str, Any]:
    data = config.to_dict()
    return {key: data[key] for key in ("analysis", "attack", "corruption")}


def _measurement_settings_match(path: Path, config: ExperimentConfig) -> bool:
    try:
        stored = load_json(path)
    except (ValueError, OSError):
        return False
    return stored.get("settings") == _measurement_settings(config)


def transfer_pass(config: ExperimentConfig, splits: Splits, root: Path, outcomes: List[CellOutcome]) -> None:
    """Attack every alpha cell with PGD examples from the alpha = 0 model of the same and the next seed."""
    ok = {o.cell: o for o in outcomes if o.status == "ok"}
    seeds = list(config.seeds)
    sources = {s: ok.get(Cell(0, 0.0, s)) for s in seeds}
    if not any(sources.values()):
        logger.warning("transfer attacks skipped: no alpha = 0 model in the sweep")
        return
    test = splits.test
    adversarial: Dict[Tuple[int, int], np.ndarray] = {}
    for seed in seeds:
        outcome = sources[seed]
        if outcome is None:
            continue
        source_net = load_trained(_record_for(outcome))
        for steps in config.attack.pgd_steps:
            adversarial[(seed, steps)] = perturb(source_net, test.images, test.labels, pgd_config(config, steps))
    for cell, outcome in sorted(ok.items()):
        if cell.pgd_train_steps:
            continue
        target = load_trained(_record_for(outcome))
        position = seeds.index(cell.seed)
        rows = []
        for relation, source_seed in (("same_replicate", cell.seed),
                                      ("different_replicate", seeds[(position + 1) % len(seeds)])):
            for steps in config.attack.pgd_steps:
                x_adv = adversarial.get((source_seed, steps))
                if x_adv is None:
                    continue
                rows.append({
                    "source": relation, "source_seed": source_seed, "steps": steps,
                    "accuracy": accuracy(target, x_adv, test.labels),
                })
        write_with_meta("transfer", {"cell": cell.key(), "families": {"transfer": rows}},
                        Path(outcome.run_dir) / TRANSFER_NAME)


def _record_for(outcome: CellOutcome) -> RunRecord:
    from selrobust.training import load_run_record

    record = load_run_record(Path(outcome.run_dir))
    if record is None:
        raise ConfigError(f"run record missing for {outcome.cell.name}")
    return record


def write_status(root: Path, outcomes: List[CellOutcome]) -> Path:
    path = Path(root) / STATUS_NAME
    cells = [o.to_dict() for o in sorted(outcomes, key=lambda o: o.cell)]
    write_with_meta("sweep-status", {
        "cells": cells,
        "completed": sum(1 for o in outcomes if o.status == "ok"),
        "failed": sum(1 for o in outcomes if o.status != "ok"),
    }, path)
    return path


def run_alpha_sweep(config: ExperimentConfig, output_dir: Optional[Path] = None) -> SweepResult:
    """Train and measure every cell, run the transfer pass, and emit the consolidated report."""
    from selrobust.report import collect_cell_measurements, emit_report

    root = Path(output_dir or config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    splits = prepare_splits(config, root)
    cells = sweep_cells(config)
    logger.info("Sweep: %d cells, %d worker(s), output %s", len(cells), config.workers, root)

    for cell in cells:
        measurements = cell_dir(root, cell) / MEASUREMENTS_NAME
        if measurements.is_file() and not _measurement_settings_match(measurements, config):
            measurements.unlink()

    outcomes: List[CellOutcome] = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {pool.submit(run_cell, config, splits, root, c): c for c in cells}
            for future in as_completed(futures):
                outcome = future.result()
                logger.debug("cell %s: %s", outcome.cell.name, outcome.status)
                outcomes.append(outcome)
    else:
        for cell in cells:
            outcomes.append(run_cell(config, splits, root, cell))
    outcomes.sort(key=lambda o: o.cell)

    if config.attack.transfer:
        try:
            transfer_pass(config, splits, root, outcomes)
        except (SelRobustError, ArithmeticError, ValueError, OSError) as exc:
            logger.error("Transfer pass failed: %s. Hint: the per-cell reports are unaffected.", exc)

    write_status(root, outcomes)
    records = collect_cell_measurements(root)
    if not records:
        logger.error("No cell finished. Hint: check %s for per-cell errors.", root / STATUS_NAME)
        return SweepResult(root=root, outcomes=outcomes)
    files = emit_report(records, root / "report", config=config)
    return SweepResult(root=root, outcomes=outcomes, report_files=files)
