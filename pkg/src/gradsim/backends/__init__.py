"""Kernel backend selection.

The hot kernels (binary16 codec, half-accumulator sum, top-k selection) have
two interchangeable implementations: a numba ``@njit`` version and a pure
numpy fallback.  The active one is chosen once at import time:

* ``GRADSIM_BACKEND=numba`` forces numba (import error if unavailable),
* ``GRADSIM_BACKEND=numpy`` forces the numpy fallback,
* unset or ``auto`` prefers numba when importable, else numpy.

Both backends are importable side by side (``benchmarks/bench_kernels.py``
and the equivalence tests rely on that); only the re-exports below switch.
"""
from __future__ import annotations

import os

from .. import errors


def _select():
    choice = os.environ.get("GRADSIM_BACKEND", "auto").strip().lower() or "auto"
    if choice == "numpy":
        from . import numpy_backend

        return numpy_backend
    if choice == "numba":
        from . import numba_backend

        return numba_backend
    if choice == "auto":
        try:
            from . import numba_backend

            return numba_backend
        except ImportError:
            from . import numpy_backend

            return numpy_backend
    raise errors.ConfigError(
        "GRADSIM_BACKEND", f"unknown backend {choice!r} (expected numba, numpy, or auto)"
    )


_impl = _select()

ACTIVE = _impl.NAME
f16_bits_to_f32_bits = _impl.f16_bits_to_f32_bits
f32_bits_to_f16_bits = _impl.f32_bits_to_f16_bits
half_sum_bits = _impl.half_sum_bits
topk_magnitude_indices = _impl.topk_magnitude_indices

__all__ = [
    "ACTIVE",
    "f16_bits_to_f32_bits",
    "f32_bits_to_f16_bits",
    "half_sum_bits",
    "topk_magnitude_indices",
]
