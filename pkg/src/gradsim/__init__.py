"""gradsim: a deterministic simulator for distributed gradient descent.

Modules
-------
tensor       gradient vectors, chunk plans, serialization, fusion buffers
simnet       deterministic discrete-event network simulator
collectives  ring / halving-doubling / binary-blocks / hierarchical all-reduce
ftreduce     replicated fault-tolerant all-reduce (raft-style groups)
optim        SGD variants: sync with backups, stale-async, EASGD, gossip, LARS
compress     gradient compression: DGC, dropping, ternary and 1-bit quantization
precision    software binary16 emulation and loss scaling
harness      workloads, experiment runner, presets, CLI
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
