"""Deterministic result records.

Experiments emit flat records that serialize to JSONL with sorted keys, so
two runs with the same seed produce byte-identical files apart from the
wall_clock field, which is excluded from the determinism contract.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["ResultRecord", "write_records", "read_records", "strip_volatile"]


@dataclass(frozen=True)
class ResultRecord:
    experiment: str
    task_index: int
    metric: str
    value: float
    stderr: float = None
    seed: int = None
    params: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    wall_clock: float = None


def _jsonable(obj):
    """Coerce numpy scalars/arrays and exotic floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _revive(value):
    if value == "nan":
        return math.nan
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    return value


def write_records(path, records) -> None:
    """Write records as JSONL, sorted by (task_index, metric)."""
    rows = sorted(records, key=lambda r: (r.task_index, r.metric))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in rows:
            fh.write(json.dumps(_jsonable(asdict(rec)), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_records(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            for key in ("value", "stderr"):
                if key in row:
                    row[key] = _revive(row[key])
            out.append(row)
    return out


def strip_volatile(row: dict) -> dict:
    """Drop fields outside the byte-determinism contract."""
    return {k: v for k, v in row.items() if k != "wall_clock"}
