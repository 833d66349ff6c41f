"""Experiment reports and their JSON / CSV emitters.

Both emitters format every float through the same 17-significant-digit
rule, so any numeric field shared between the two files is bit-exact
identical text.  Writes go through a temp file + rename, never leaving
a partially written report behind.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

from .trainer import Metrics

SIGNIFICANT_DIGITS = 17


def format_number(value) -> str:
    """Canonical text for one numeric cell; round-trips IEEE doubles."""
    if isinstance(value, bool):
        raise TypeError("booleans have no numeric cell format")
    if isinstance(value, int):
        return str(value)
    return format(float(value), f".{SIGNIFICANT_DIGITS}g")


def _json_fragment(obj, indent: int) -> str:
    pad = "  " * indent
    inner_pad = "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, float)):
        return format_number(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            return "[]"
        items = [_json_fragment(v, indent + 1) for v in obj]
        # Scalar-only lists stay on one line; nested ones get indented.
        if all(not isinstance(v, (list, tuple, dict)) for v in obj):
            return "[" + ", ".join(items) + "]"
        body = ",\n".join(inner_pad + item for item in items)
        return "[\n" + body + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        parts = []
        for key, value in obj.items():
            parts.append(
                inner_pad + json.dumps(str(key)) + ": " + _json_fragment(value, indent + 1)
            )
        return "{\n" + ",\n".join(parts) + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__} into a report")


def json_text(obj) -> str:
    return _json_fragment(obj, 0) + "\n"


def csv_text(fieldnames: list[str], rows: list[dict]) -> str:
    """Minimal CSV: header + one line per row, numbers via format_number."""
    def cell(value) -> str:
        if value is None:
            return ""
        if isinstance(value, str):
            if any(ch in value for ch in ",\"\n"):
                return '"' + value.replace('"', '""') + '"'
            return value
        return format_number(value)

    lines = [",".join(fieldnames)]
    for row in rows:
        lines.append(",".join(cell(row.get(name)) for name in fieldnames))
    return "\n".join(lines) + "\n"


def write_text_atomic(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".report-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ExperimentReport:
    """Everything needed to reproduce and plot one incremental run."""

    config: dict
    metrics: Metrics
    stages: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0
    seed: int = 0
    version: str = "0"
    label: str = "run"

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "version": self.version,
            "seed": self.seed,
            "wall_seconds": self.wall_seconds,
            "config": dict(self.config),
            "metrics": {
                "per_stage_accuracy": list(self.metrics.per_stage_accuracy),
                "final": self.metrics.final,
                "average": self.metrics.average,
            },
            "stages": [dict(stage) for stage in self.stages],
        }

    def to_json(self) -> str:
        return json_text(self.to_dict())

    def to_csv(self) -> str:
        names = [
            "stage",
            "accuracy",
            "mean_max_weight",
            "mean_weight_entropy",
            "train_seconds",
        ]
        return csv_text(names, self.stages)

    def summary_row(self) -> dict:
        """Wide-format row for combined tables (ablations, sweeps)."""
        row: dict = {"label": self.label}
        for i, acc in enumerate(self.metrics.per_stage_accuracy, start=1):
            row[f"stage_{i}"] = acc
        row["average"] = self.metrics.average
        row["final"] = self.metrics.final
        row["wall_seconds"] = self.wall_seconds
        return row
