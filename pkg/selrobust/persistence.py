"""JSON and CSV writers shared by the harness."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

logger = logging.getLogger(__name__)


def ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def load_json(path: Path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    path = Path(path)
    ensure_parent(path)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def _finite_or_none(value: Any) -> Any:
    # JSON has no NaN; missing statistics are written as null
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_none(v) for v in value]
    return value


def write_with_meta(kind: str, payload: Dict[str, Any], path: Path,
                    config_hash: Optional[str] = None) -> Dict[str, Any]:
    """Write ``payload`` plus ``kind``, ``config_hash`` and a checksum of the canonical payload."""
    payload = _finite_or_none(payload)
    report: Dict[str, Any] = {
        "kind": kind,
        "checksum": sha256_bytes(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")),
    }
    if config_hash is not None:
        report["config_hash"] = config_hash
    report.update(payload)
    write_json(Path(path), report)
    logger.debug("Wrote %s to %s", kind, path)
    return report


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    """Fixed column order; floats as ``repr``; missing values as empty cells."""
    path = Path(path)
    ensure_parent(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(col)) for col in columns])
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
