"""Named presets: canned experiment configs runnable from the CLI.

Each preset is an ExperimentConfig with the runner's default parameters;
``gradsim preset <name>`` runs one, ``gradsim list-presets`` lists them.
A config file with the same experiment name and params reproduces a preset
exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

from .config import ExperimentConfig, WorkloadSpec


@dataclass(frozen=True)
class Preset:
    name: str
    summary: str
    config: ExperimentConfig


_QUAD = WorkloadSpec(kind="quadratic", dim=20, size=4096, seed=0)


def _preset(name, summary, experiment=None, workload=None, params=None):
    cfg = ExperimentConfig(experiment=experiment or name, name=name, seed=0,
                           workload=workload, params=dict(params or {}))
    return Preset(name=name, summary=summary, config=cfg)


_ALL = [
    _preset("collective-correctness",
            "five all-reduce algorithms vs the sequential oracle, p 1..33, "
            "four vector lengths, integer and float data"),
    _preset("step-counts",
            "unit-startup wire: ring finishes in 2(p-1) s, halving-doubling "
            "in 2 log2 p"),
    _preset("binary-blocks",
            "power-of-two decomposition structure and the p=7 idle-node audit "
            "vs plain halving-doubling"),
    _preset("ft-chaos",
            "100 seeded kill schedules (one replica per group) still reduce "
            "bit-exactly; a killed majority fails cleanly"),
    _preset("sync-exact",
            "4-worker synchronous SGD, no backups: weights bit-identical to "
            "single-node SGD on the union batch",
            workload=_QUAD),
    _preset("single-node",
            "the union-batch SGD baseline that sync-exact must reproduce",
            workload=_QUAD),
    _preset("straggler-backup",
            "16 workers under a heavy exponential tail: 12-of-16 strictly "
            "faster than 16-of-16 on 100 paired seeds, loss gap under 5%",
            workload=_QUAD),
    _preset("softsync",
            "softsync grouping arithmetic and the n=1 barrier: staleness "
            "identically zero",
            workload=_QUAD),
    _preset("easgd-quadratic",
            "elastic averaging hand values to 1e-15; center reaches the "
            "quadratic minimizer for tau in {1,4,16}",
            workload=_QUAD),
    _preset("lars-layers",
            "layer-wise adaptive rates: trust identity, published norm "
            "ratio, joint rescale invariance"),
    _preset("linear-scaling",
            "warmup schedule endpoints exact for k in {2,8,32}; batch "
            "growth respects its cap"),
    _preset("dgc-sweep",
            "top-k compression on a 10^4-dim quadratic: s=0 bit-equals the "
            "dense run; s=0.99 cuts wire bytes 50x within 10% loss",
            workload=WorkloadSpec(kind="quadratic", dim=10_000, size=1, seed=0)),
    _preset("error-feedback",
            "gradient dropping and 1-bit quantization conserve mass "
            "bit-exactly over 1000 steps"),
    _preset("mixed-precision",
            "binary16 codec round-trip, loss-scaling underflow rescue, and "
            "overflow skip semantics"),
    _preset("determinism",
            "every other preset, run twice: metrics and trace files must be "
            "byte-identical"),
]

PRESETS = {p.name: p for p in _ALL}
