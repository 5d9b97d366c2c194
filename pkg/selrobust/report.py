"""Consolidated per-family tables and the bootstrap summary."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from selrobust.config import ExperimentConfig, ReportSettings
from selrobust.errors import DegenerateInputError
from selrobust.persistence import load_json, write_csv, write_with_meta
from selrobust.tensor.rng import STREAM_BOOTSTRAP, Rng

logger = logging.getLogger(__name__)

KEY_COLUMNS = ("pgd_train_steps", "alpha", "seed")
REPORT_FORMATS = ("csv", "json")

# family -> (grouping columns, value columns); the CSV column order is grouping + values
FAMILIES: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "accuracy": (("split",), ("accuracy",)),
    "training": (("epoch",), ("train_loss", "val_accuracy", "minibatch_si", "learning_rate", "best")),
    "selectivity": (("layer",), ("mean_si", "mean_si_alive", "dead_proportion")),
    "units": (("layer", "unit"), ("si", "dead")),
    "pgd_training": ((), ("mean_si", "mean_si_alive", "dead_proportion")),
    "corruption": (("kind", "severity"), ("accuracy",)),
    "corruption_summary": (("statistic",), ("value",)),
    "fgsm": (("epsilon",), ("accuracy", "mean_loss_before", "mean_loss_after")),
    "pgd": (("epsilon", "steps", "step_size", "step_rule"), ("accuracy",)),
    "transfer": (("source", "source_seed", "steps"), ("accuracy",)),
    "jacobian": (("norm", "samples"), ("mean",)),
    "gradient_cv": (("layer",), ("mu_l", "sigma_l", "cv_l", "mean_cv_u")),
    "gradient_units": (("layer", "unit"), ("mu_u", "sigma_u", "cv_u")),
    "dimensionality": (("layer", "mode", "threshold_or_method"), ("value",)),
}

# Families summarized with confidence intervals (per-unit and per-epoch tables are not).
SUMMARY_FAMILIES = (
    "accuracy", "selectivity", "pgd_training", "corruption_summary", "fgsm", "pgd",
    "transfer", "jacobian", "gradient_cv", "dimensionality",
)


@dataclass
class CellMeasurements:
    alpha: float
    seed: int
    pgd_train_steps: int
    families: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)

    @property
    def sort_key(self) -> Tuple[int, float, int]:
        return (self.pgd_train_steps, self.alpha, self.seed)


def collect_cell_measurements(root: Path) -> List[CellMeasurements]:
    """Read every ``runs/*/measurements.json`` (plus ``transfer.json``) under a sweep directory."""
    from selrobust.sweep import MEASUREMENTS_NAME, TRANSFER_NAME

    records = []
    for path in sorted((Path(root) / "runs").glob(f"*/{MEASUREMENTS_NAME}")):
        try:
            data = load_json(path)
        except (ValueError, OSError) as exc:
            logger.warning("Skipping unreadable measurements %s: %s", path, exc)
            continue
        cell = data["cell"]
        record = CellMeasurements(
            alpha=float(cell["alpha"]),
            seed=int(cell["seed"]),
            pgd_train_steps=int(cell["pgd_train_steps"]),
            families=dict(data.get("families", {})),
        )
        transfer = path.parent / TRANSFER_NAME
        if transfer.is_file():
            try:
                record.families.update(load_json(transfer).get("families", {}))
            except (ValueError, OSError) as exc:
                logger.warning("Skipping unreadable transfer results %s: %s", transfer, exc)
        records.append(record)
    records.sort(key=lambda r: r.sort_key)
    logger.debug("Collected %d cell measurement file(s) from %s", len(records), root)
    return records


def bootstrap_ci(values: Sequence[float], resamples: int = 1000, confidence: float = 0.95,
                 seed: int = 0) -> Tuple[float, float]:
    """Percentile bootstrap CI of the mean; collapses to the point value for n < 2 or zero spread."""
    arr = np.asarray([v for v in values if v is not None and not np.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        raise DegenerateInputError("bootstrap_ci needs at least one finite value")
    mean = float(arr.mean())
    if arr.size < 2 or np.all(arr == arr[0]):
        return mean, mean
    result = stats.bootstrap(
        (arr,), np.mean,
        n_resamples=resamples,
        confidence_level=confidence,
        method="percentile",
        random_state=Rng(seed).derive(STREAM_BOOTSTRAP).generator,
    )
    return float(result.confidence_interval.low), float(result.confidence_interval.high)


def consolidated_rows(records: Sequence[CellMeasurements], family: str) -> List[Dict[str, Any]]:
    rows = []
    for record in sorted(records, key=lambda r: r.sort_key):
        for row in record.families.get(family, []):
            merged = {"pgd_train_steps": record.pgd_train_steps, "alpha": record.alpha, "seed": record.seed}
            merged.update(row)
            rows.append(merged)
    return rows


def _as_float(value: Any) -> Optional[float]:
    if value is None or value == "":
        return None
    try:
        out = float(value)
    except (TypeError, ValueError):
        return None
    return None if np.isnan(out) else out


def summarize(records: Sequence[CellMeasurements], settings: ReportSettings) -> List[Dict[str, Any]]:
    """Mean, median and bootstrap CI across seeds for every (family, keys, metric, alpha, pgd_train_steps)."""
    entries: List[Dict[str, Any]] = []
    for family in SUMMARY_FAMILIES:
        group_cols, value_cols = FAMILIES[family]
        groups: Dict[Tuple[Any, ...], List[float]] = {}
        for row in consolidated_rows(records, family):
            for metric in value_cols:
                value = _as_float(row.get(metric))
                if value is None:
                    continue
                key = (row["pgd_train_steps"], row["alpha"]) + tuple(row.get(c) for c in group_cols) + (metric,)
                groups.setdefault(key, []).append(value)
        for key in sorted(groups, key=lambda k: tuple(str(v) if not isinstance(v, (int, float)) else v
                                                      for v in k)):
            values = groups[key]
            low, high = bootstrap_ci(values, settings.bootstrap_resamples, settings.confidence,
                                     settings.bootstrap_seed)
            entry: Dict[str, Any] = {
                "family": family,
                "pgd_train_steps": key[0],
                "alpha": key[1],
                "metric": key[-1],
                "keys": {c: v for c, v in zip(group_cols, key[2:-1])},
                "n": len(values),
                "mean": float(np.mean(values)),
                "median": float(np.median(values)),
                "ci_low": low,
                "ci_high": high,
            }
            entries.append(entry)
    return entries


def emit_report(records: Sequence[CellMeasurements], out_dir: Path, format: str = "csv",
                config: Optional[ExperimentConfig] = None) -> List[Path]:
    """Write one table per metric family plus ``summary.json``; returns the written paths."""
    if not records:
        raise DegenerateInputError("emit_report needs at least one cell's measurements")
    if format not in REPORT_FORMATS:
        raise ValueError(f"format must be one of {REPORT_FORMATS}, got {format!r}")
    settings = config.report if config is not None else ReportSettings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for family, (group_cols, value_cols) in FAMILIES.items():
        rows = consolidated_rows(records, family)
        if not rows:
            continue
        if format == "csv":
            columns = list(KEY_COLUMNS) + list(group_cols) + list(value_cols)
            written.append(write_csv(out_dir / f"{family}.csv", columns, rows))
        else:
            path = out_dir / f"{family}.json"
            write_with_meta(family, {"rows": rows}, path)
            written.append(path)
    summary = summarize(records, settings)
    summary_path = out_dir / "summary.json"
    write_with_meta("summary", {
        "cells": len(records),
        "alphas": sorted({r.alpha for r in records}),
        "seeds": sorted({r.seed for r in records}),
        "bootstrap": {
            "resamples": settings.bootstrap_resamples,
            "confidence": settings.confidence,
            "seed": settings.bootstrap_seed,
            "method": "percentile",
        },
        "entries": summary,
    }, summary_path)
    written.append(summary_path)
    logger.info("Report: %d file(s) written to %s", len(written), out_dir)
    return written


def headline(records: Sequence[CellMeasurements]) -> List[Dict[str, Any]]:
    """Per-alpha medians of the main metrics for the console table."""
    out = []
    by_alpha: Dict[Tuple[int, float], List[CellMeasurements]] = {}
    for r in records:
        by_alpha.setdefault((r.pgd_train_steps, r.alpha), []).append(r)

    def pick(cells: List[CellMeasurements], family: str, where: Dict[str, Any], metric: str) -> Optional[float]:
        values = []
        for cell in cells:
            for row in cell.families.get(family, []):
                if all(row.get(k) == v for k, v in where.items()):
                    value = _as_float(row.get(metric))
                    if value is not None:
                        values.append(value)
        return float(np.median(values)) if values else None

    for (steps, alpha), cells in sorted(by_alpha.items()):
        out.append({
            "pgd_train_steps": steps,
            "alpha": alpha,
            "seeds": len(cells),
            "mean_si": pick(cells, "selectivity", {"layer": "network"}, "mean_si"),
            "test_accuracy": pick(cells, "accuracy", {"split": "test"}, "accuracy"),
            "corrupted_accuracy": pick(cells, "corruption_summary", {"statistic": "grand_mean"}, "value"),
            "jacobian": pick(cells, "jacobian", {}, "mean"),
        })
    return out
