"""Action functions behind the CLI; each returns a process exit code.

Exit codes: 0 success, 1 bad input (config, files, shapes), 2 numerical or
training failure.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Optional

from selrobust.config import ExperimentConfig, deep_merge
from selrobust.errors import (
    FloorEffectError,
    NonFiniteError,
    SelRobustError,
    TrainingDivergedError,
)
from selrobust.output import print_metric_table, print_sweep_header

logger = logging.getLogger(__name__)

NUMERICAL_ERRORS = (NonFiniteError, TrainingDivergedError, FloorEffectError)


def _exit_code(exc: BaseException) -> int:
    return 2 if isinstance(exc, NUMERICAL_ERRORS) else 1


def _report_failure(action: str, exc: BaseException) -> int:
    rc = _exit_code(exc)
    if isinstance(exc, SelRobustError):
        # SelRobustError.__str__ already carries the hint
        logger.error("%s failed: %s", action, exc)
    elif isinstance(exc, OSError):
        logger.error("%s failed: %s. Hint: check that the path exists and is writable.", action, exc)
    else:
        logger.error("%s failed: %s. Hint: rerun with --verbose for details.", action, exc)
    return rc


def build_config(settings: Optional[Dict[str, Any]], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    merged = deep_merge(settings or {}, overrides or {})
    return ExperimentConfig.from_mapping(merged)


def _drop_none(mapping: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in mapping.items() if v is not None}


def _load_inputs(checkpoint: str, data: str):
    from selrobust.data import load_dataset
    from selrobust.models import load_checkpoint

    return load_checkpoint(checkpoint), load_dataset(data)


def run_gen_data(
    out: str,
    settings: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
    n_classes: Optional[int] = None,
    train_per_class: Optional[int] = None,
    val_per_class: Optional[int] = None,
    test_per_class: Optional[int] = None,
    image_size: Optional[int] = None,
    noise: Optional[float] = None,
) -> int:
    logger.debug("run_gen_data called: out=%s, seed=%s, n_classes=%s", out, seed, n_classes)
    from dataclasses import asdict

    from selrobust.data import generate_synthetic_dataset, save_dataset

    try:
        config = build_config(settings, {"data": _drop_none({
            "seed": seed, "n_classes": n_classes, "train_per_class": train_per_class,
            "val_per_class": val_per_class, "test_per_class": test_per_class,
            "image_size": image_size, "noise": noise,
        })})
        d = config.data
        splits = generate_synthetic_dataset(
            d.seed, d.n_classes, d.train_per_class, d.val_per_class, d.test_per_class, d.image_size, d.noise,
        )
        save_dataset(splits, Path(out), meta=asdict(d))
        rc = 0
    except (SelRobustError, OSError) as exc:
        rc = _report_failure("gen-data", exc)
    logger.info("run_gen_data completed with exit code %d", rc)
    return rc


def run_train(
    alpha: float,
    seed: int,
    settings: Optional[Dict[str, Any]] = None,
    data: Optional[str] = None,
    out: Optional[str] = None,
    epochs: Optional[int] = None,
    learning_rate: Optional[float] = None,
    batch_size: Optional[int] = None,
    pgd_train_steps: int = 0,
) -> int:
    logger.debug("run_train called: alpha=%s, seed=%d, data=%s, out=%s", alpha, seed, data, out)
    from selrobust.sweep import Cell, cell_dir, prepare_splits, training_rows
    from selrobust.training import train

    try:
        config = build_config(settings, {
            "data": _drop_none({"path": data}),
            "train": _drop_none({"epochs": epochs, "learning_rate": learning_rate, "batch_size": batch_size}),
        })
        root = Path(config.output_dir)
        splits = prepare_splits(config, None if config.data.path else root)
        run_dir = Path(out) if out else cell_dir(root, Cell(pgd_train_steps, float(alpha), int(seed)))
        record = train(config, alpha, seed, splits, run_dir, pgd_train_steps=pgd_train_steps)
        print_metric_table(f"Training alpha={alpha} seed={seed}", training_rows(record))
        rc = 0
    except (SelRobustError, OSError) as exc:
        rc = _report_failure("train", exc)
    logger.info("run_train completed with exit code %d", rc)
    return rc


def run_attack(
    checkpoint: str,
    data: str,
    kind: str,
    epsilon: float,
    steps: int = 0,
    step_size: Optional[float] = None,
    step_fraction: float = 0.1,
    split: str = "test",
    dump: Optional[str] = None,
    out: Optional[str] = None,
) -> int:
    logger.debug("run_attack called: checkpoint=%s, kind=%s, epsilon=%s, steps=%d",
                 checkpoint, kind, epsilon, steps)
    import numpy as np

    from selrobust.attacks import AttackConfig, fgsm, pgd
    from selrobust.persistence import write_with_meta
    from selrobust.tensor.stns import write_stns

    try:
        net, splits = _load_inputs(checkpoint, data)
        ds = splits[split]
        if kind == "fgsm":
            result = fgsm(net, ds.images, ds.labels, AttackConfig(kind="fgsm", epsilon=epsilon))
        else:
            config = AttackConfig.pgd(epsilon, steps, step_size=step_size, step_fraction=step_fraction)
            result = pgd(net, ds.images, ds.labels, config)
        summary = result.summary()
        summary["split"] = split
        summary["max_abs_perturbation"] = float(np.abs(result.perturbed - ds.images).max())
        if dump:
            write_stns(Path(dump) / "adversarial.stns", result.perturbed)
            write_stns(Path(dump) / "labels.stns", ds.labels.astype(np.float64))
        if out:
            write_with_meta("attack", summary, Path(out))
        print_metric_table(f"{kind.upper()} attack", [{
            "epsilon": result.config.epsilon, "steps": result.config.iterations,
            "clean": result.clean_accuracy, "adversarial": result.adversarial_accuracy,
        }])
        rc = 0
    except (SelRobustError, OSError, ValueError) as exc:
        rc = _report_failure("attack", exc)
    logger.info("run_attack completed with exit code %d", rc)
    return rc


def run_corrupt(
    checkpoint: str,
    data: str,
    settings: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
    split: str = "test",
    out: Optional[str] = None,
) -> int:
    logger.debug("run_corrupt called: checkpoint=%s, data=%s, seed=%s", checkpoint, data, seed)
    from selrobust.persistence import write_csv, write_with_meta
    from selrobust.sweep import measure_corruption

    try:
        config = build_config(settings, {"corruption": _drop_none({"seeds": [seed] if seed is not None else None})})
        net, splits = _load_inputs(checkpoint, data)
        rows, summary = measure_corruption(net, splits[split], config)
        if out:
            target = Path(out)
            write_csv(target, ["kind", "severity", "accuracy"], rows)
            write_with_meta("corruption-summary", {"split": split, "rows": summary}, target.with_suffix(".json"))
        print_metric_table("Corruption summary", summary, ["statistic", "value"])
        rc = 0
    except (SelRobustError, OSError, ValueError) as exc:
        rc = _report_failure("corrupt", exc)
    logger.info("run_corrupt completed with exit code %d", rc)
    return rc


ANALYSES = ("selectivity", "gradients", "jacobian", "dimensionality")


def run_analyze(
    checkpoint: str,
    data: str,
    what: str,
    settings: Optional[Dict[str, Any]] = None,
    source: str = "none",
    spectral: Optional[bool] = None,
    split: str = "test",
    out: Optional[str] = None,
) -> int:
    logger.debug("run_analyze called: checkpoint=%s, what=%s, source=%s", checkpoint, what, source)
    from selrobust.persistence import write_csv
    from selrobust.report import FAMILIES
    from selrobust.sweep import (
        measure_dimensionality,
        measure_gradients,
        measure_jacobian,
        measure_selectivity,
    )

    try:
        config = build_config(settings, {"analysis": _drop_none({"spectral": spectral})})
        net, splits = _load_inputs(checkpoint, data)
        ds = splits[split]
        tables: Dict[str, Any] = {}
        if what == "selectivity":
            tables["selectivity"], tables["units"] = measure_selectivity(net, ds, config)
        elif what == "gradients":
            tables["gradient_cv"], tables["gradient_units"] = measure_gradients(net, ds, config)
        elif what == "jacobian":
            tables["jacobian"] = measure_jacobian(net, ds, config)
        elif what == "dimensionality":
            tables["dimensionality"] = measure_dimensionality(net, ds, config, sources=(source,))
        else:
            raise ValueError(f"--what must be one of {ANALYSES}, got {what!r}")
        for family, rows in tables.items():
            group_cols, value_cols = FAMILIES[family]
            columns = list(group_cols) + list(value_cols)
            if out:
                write_csv(Path(out) / f"{family}.csv", columns, rows)
            if family not in ("units", "gradient_units"):
                print_metric_table(family, rows, columns)
        rc = 0
    except (SelRobustError, OSError, ValueError) as exc:
        rc = _report_failure("analyze", exc)
    logger.info("run_analyze completed with exit code %d", rc)
    return rc


def run_sweep(settings: Optional[Dict[str, Any]] = None, overrides: Optional[Dict[str, Any]] = None) -> int:
    logger.debug("run_sweep called: overrides=%s", overrides)
    from selrobust.report import collect_cell_measurements, headline
    from selrobust.sweep import run_alpha_sweep, sweep_cells

    try:
        config = build_config(settings, overrides)
        print_sweep_header(len(sweep_cells(config)), config.workers, config.output_dir, config.attack.step_rule)
        result = run_alpha_sweep(config)
        if result.report_files:
            print_metric_table("Per-alpha medians", headline(collect_cell_measurements(result.root)))
        if result.failed:
            for outcome in result.failed:
                logger.error("Cell %s failed: %s", outcome.cell.name, outcome.error)
            rc = 1
        else:
            rc = 0
    except (SelRobustError, OSError) as exc:
        rc = _report_failure("sweep", exc)
    logger.info("run_sweep completed with exit code %d", rc)
    return rc


def run_report(
    sweep_dir: str,
    settings: Optional[Dict[str, Any]] = None,
    out: Optional[str] = None,
    format: str = "csv",
) -> int:
    logger.debug("run_report called: sweep_dir=%s, out=%s, format=%s", sweep_dir, out, format)
    from selrobust.report import collect_cell_measurements, emit_report, headline

    try:
        config = build_config(settings)
        records = collect_cell_measurements(Path(sweep_dir))
        if not records:
            logger.error(
                "No measurements under '%s'. Hint: run 'selrobust sweep' first or check --sweep-dir.",
                sweep_dir,
            )
            rc = 1
        else:
            emit_report(records, Path(out) if out else Path(sweep_dir) / "report", format=format, config=config)
            print_metric_table("Per-alpha medians", headline(records))
            rc = 0
    except (SelRobustError, OSError, ValueError) as exc:
        rc = _report_failure("report", exc)
    logger.info("run_report completed with exit code %d", rc)
    return rc
