"""run_experiment / compare_runs: the harness entry points."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import yaml

from ..errors import ConfigError, DecodeError
from .config import ExperimentConfig
from .experiments import RUNNERS, ExperimentOutput
from .metrics import (METRICS_HEADER, read_metrics, write_metrics, write_summary,
                      write_trace)


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list
    trace_lines: list
    checks: list
    summary: dict
    passed: bool
    out_dir: str | None = None


def run_experiment(config: ExperimentConfig, out_dir: str | None = None) -> RunResult:
    """Run one experiment; optionally write metrics.csv/trace.log/summary.txt.

    The summary block is machine-readable key: value lines.  wall_clock_s
    lives only there, never in the metrics or trace, so repeated runs yield
    byte-identical data files.
    """
    runner = RUNNERS.get(config.experiment)
    if runner is None:
        known = ", ".join(sorted(RUNNERS))
        raise ConfigError("experiment",
                          f"unknown experiment {config.experiment!r} (known: {known})")
    t0 = time.perf_counter()
    out: ExperimentOutput = runner(config)
    wall = time.perf_counter() - t0

    passed = all(ok for _, ok, _ in out.checks)
    summary = {
        "name": config.name or config.experiment,
        "experiment": config.experiment,
        "seed": config.seed,
        "pass": passed,
    }
    for name, ok, detail in out.checks:
        summary[f"check_{name}"] = "pass" if ok else f"FAIL ({detail})"
    summary.update(out.extras)
    if out.records:
        summary["final_loss"] = float(out.records[-1].loss)
        summary["sim_time"] = float(out.records[-1].sim_time)
    summary["rows"] = len(out.records)
    summary["total_bytes"] = out.total_bytes
    summary["wall_clock_s"] = round(wall, 3)

    target = out_dir or config.out_dir
    if target is not None:
        os.makedirs(target, exist_ok=True)
        write_metrics(os.path.join(target, "metrics.csv"), out.records)
        write_trace(os.path.join(target, "trace.log"), out.trace_lines)
        write_summary(os.path.join(target, "summary.txt"), summary)
    return RunResult(config=config, records=out.records, trace_lines=out.trace_lines,
                     checks=out.checks, summary=summary, passed=passed,
                     out_dir=target)


# ---------------------------------------------------------------------------
# comparing runs


_RELATIONS = ("equal", "strictly-less", "rel")


def _parse_relation(column: str, spec):
    if isinstance(spec, str):
        if spec == "equal":
            return ("equal", 0.0)
        if spec == "strictly-less":
            return ("strictly-less", 0.0)
        if spec.startswith("rel:"):
            try:
                return ("rel", float(spec[4:]))
            except ValueError:
                pass
    if isinstance(spec, dict) and set(spec) == {"rel"}:
        return ("rel", float(spec["rel"]))
    raise ConfigError(f"tolspec.{column}",
                      f"expected equal | strictly-less | rel:<tol>, got {spec!r}")


def _metrics_path(path: str) -> str:
    if os.path.isdir(path):
        return os.path.join(path, "metrics.csv")
    return path


def load_tolspec(source) -> dict:
    """A tolerance spec maps column name -> relation."""
    if isinstance(source, dict):
        tree = source
    else:
        try:
            with open(source) as f:
                tree = yaml.safe_load(f.read())
        except OSError as exc:
            raise ConfigError(str(source), f"cannot read tolerance spec: {exc}") from exc
    if not isinstance(tree, dict) or not tree:
        raise ConfigError("tolspec", "expected a nonempty mapping of column -> relation")
    columns = METRICS_HEADER.split(",")
    parsed = {}
    for column, spec in tree.items():
        if column not in columns:
            raise ConfigError(f"tolspec.{column}", "not a metrics column")
        parsed[column] = _parse_relation(column, spec)
    return parsed


def compare_runs(a_path: str, b_path: str, tolspec) -> dict:
    """Column-wise comparison of two metrics files.

    tolspec: mapping (or YAML file) column -> equal | strictly-less |
    rel:<tol>.  Returns {"ok": bool, "rows": n, "columns": {...}}.  A schema
    or row-count mismatch raises DecodeError: that is a shape problem, not a
    tolerance failure.
    """
    spec = load_tolspec(tolspec)
    ra = read_metrics(_metrics_path(a_path))
    rb = read_metrics(_metrics_path(b_path))
    if len(ra) != len(rb):
        raise DecodeError(f"row count mismatch: {len(ra)} vs {len(rb)} "
                          f"({a_path} vs {b_path})")
    report = {"ok": True, "rows": len(ra), "columns": {}}
    for column, (relation, tol) in spec.items():
        xs = [getattr(r, column) for r in ra]
        ys = [getattr(r, column) for r in rb]
        ok = True
        worst = 0.0
        bad_row = -1
        for i, (x, y) in enumerate(zip(xs, ys)):
            if relation == "equal":
                good = x == y
                gap = abs(x - y)
            elif relation == "strictly-less":
                good = x < y
                gap = x - y
            else:
                denom = max(abs(x), abs(y))
                gap = abs(x - y) / denom if denom else 0.0
                good = gap <= tol
            if not good and ok:
                bad_row = i
            ok &= good
            worst = max(worst, gap)
        report["columns"][column] = {
            "relation": relation if relation != "rel" else f"rel:{tol}",
            "ok": ok,
            "worst": worst,
            "first_bad_row": bad_row,
        }
        report["ok"] &= ok
    return report
