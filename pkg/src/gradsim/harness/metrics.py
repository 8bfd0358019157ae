"""Metrics records and their CSV serialization.

The column set is fixed; floats are rendered with repr() so a repeated run
produces byte-identical files, and read_metrics round-trips them exactly.
``bytes_sent`` is the cumulative traced send volume as of the row's
sim_time, so the final row of a run equals the trace file's summed message
sizes exactly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields

from ..errors import DecodeError

METRICS_HEADER = ("step,sim_time,loss,grad_norm,bytes_sent,compression_ratio,"
                  "staleness_mean,skip_count,effective_lr,effective_batch")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    sim_time: float = 0.0
    loss: float = 0.0
    grad_norm: float = 0.0
    bytes_sent: int = 0
    compression_ratio: float = 1.0
    staleness_mean: float = 0.0
    skip_count: int = 0
    effective_lr: float = 0.0
    effective_batch: int = 0

    def row(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            parts.append(str(int(v)) if f.type == "int" else repr(float(v)))
        return ",".join(parts)


_FIELD_NAMES = [f.name for f in fields(MetricsRecord)]
assert ",".join(_FIELD_NAMES) == METRICS_HEADER


def write_metrics(path: str, records) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for r in records:
            f.write(r.row() + "\n")
    os.replace(tmp, path)


def read_metrics(path: str) -> list[MetricsRecord]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        head = lines[0] if lines else "<empty>"
        raise DecodeError(f"metrics header mismatch in {path}: {head!r}")
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(_FIELD_NAMES):
            raise DecodeError(f"{path}:{ln}: expected {len(_FIELD_NAMES)} columns, "
                              f"got {len(cells)}")
        kwargs = {}
        for f, cell in zip(fields(MetricsRecord), cells):
            kwargs[f.name] = int(cell) if f.type == "int" else float(cell)
        records.append(MetricsRecord(**kwargs))
    return records


def write_trace(path: str, lines) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for line in lines:
            f.write(line + "\n")
    os.replace(tmp, path)


def write_summary(path: str, summary: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(format_summary(summary))
    os.replace(tmp, path)


def format_summary(summary: dict) -> str:
    out = []
    for key, value in summary.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        out.append(f"{key}: {value}")
    return "\n".join(out) + "\n"
