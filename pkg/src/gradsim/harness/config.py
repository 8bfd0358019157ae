"""Experiment configuration: a single YAML tree with a versioned schema.

Top-level shape (see docs/config.md for the full reference):

    schema: 1                # required, exactly 1
    experiment: sync-exact   # required, a registered runner name
    name: my-run             # optional label, defaults to the experiment
    seed: 0                  # optional master seed
    workload:                # optional, experiments that train require it
      kind: quadratic
      dim: 20
      size: 4096
      seed: 0                # defaults to the master seed
    params: {...}            # experiment-specific knobs
    output:
      dir: runs/my-run       # optional default output directory

Every validation failure raises ConfigError with the dotted field path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from ..errors import ConfigError

SCHEMA_VERSION = 1

_TOP_LEVEL = ("schema", "experiment", "name", "seed", "workload", "params", "output")


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str
    dim: int
    size: int
    seed: int


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    name: str = ""
    seed: int = 0
    workload: WorkloadSpec | None = None
    params: dict = field(default_factory=dict)
    out_dir: str | None = None


def _expect_mapping(value, path):
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _expect_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return value


def parse_config(tree, source: str = "<config>") -> ExperimentConfig:
    """Validate a parsed YAML tree into an ExperimentConfig."""
    tree = _expect_mapping(tree, source)
    for key in tree:
        if key not in _TOP_LEVEL:
            raise ConfigError(str(key), "unknown field")
    if "schema" not in tree:
        raise ConfigError("schema", "required field is missing")
    if tree["schema"] != SCHEMA_VERSION:
        raise ConfigError("schema",
                          f"unsupported version {tree['schema']!r} (this build reads "
                          f"schema {SCHEMA_VERSION})")
    experiment = tree.get("experiment")
    if not isinstance(experiment, str) or not experiment:
        raise ConfigError("experiment", f"expected a runner name, got {experiment!r}")
    seed = _expect_int(tree.get("seed", 0), "seed", minimum=0)

    workload = None
    if tree.get("workload") is not None:
        w = _expect_mapping(tree["workload"], "workload")
        for key in w:
            if key not in ("kind", "dim", "size", "seed"):
                raise ConfigError(f"workload.{key}", "unknown field")
        kind = w.get("kind")
        if not isinstance(kind, str):
            raise ConfigError("workload.kind", f"expected a string, got {kind!r}")
        workload = WorkloadSpec(
            kind=kind,
            dim=_expect_int(w.get("dim", 0), "workload.dim", minimum=1),
            size=_expect_int(w.get("size", 0), "workload.size", minimum=1),
            seed=_expect_int(w.get("seed", seed), "workload.seed", minimum=0),
        )

    params = tree.get("params") or {}
    params = dict(_expect_mapping(params, "params"))
    for key in params:
        if not isinstance(key, str):
            raise ConfigError("params", f"parameter names must be strings, got {key!r}")

    out_dir = None
    if tree.get("output") is not None:
        out = _expect_mapping(tree["output"], "output")
        for key in out:
            if key not in ("dir",):
                raise ConfigError(f"output.{key}", "unknown field")
        if out.get("dir") is not None:
            if not isinstance(out["dir"], str):
                raise ConfigError("output.dir", f"expected a path, got {out['dir']!r}")
            out_dir = out["dir"]

    name = tree.get("name", experiment)
    if not isinstance(name, str) or not name:
        raise ConfigError("name", f"expected a nonempty string, got {name!r}")
    return ExperimentConfig(experiment=experiment, name=name, seed=seed,
                            workload=workload, params=params, out_dir=out_dir)


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a config file."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(path, f"cannot read config file: {exc}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(path, f"invalid YAML: {exc}") from exc
    return parse_config(tree, source=path)


def take_param(params: dict, key: str, expected=None, default=None, minimum=None,
               choices=None):
    """Fetch params[key] with type/range checks; ConfigError paths are params.<key>."""
    value = params.get(key, default)
    path = f"params.{key}"
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
    elif expected is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif expected is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        value = list(value)
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    if choices is not None and value not in choices:
        raise ConfigError(path, f"must be one of {sorted(choices)}, got {value!r}")
    return value
