"""Kernel backend selection.

The hot ray-tracing loops exist twice: a numba ``@njit`` implementation and a
vectorized pure-numpy fallback. ``ECHOTOMO_BACKEND=numpy|numba`` picks one at
import time; numba is the default whenever it imports. ``set_backend`` switches
at runtime (used by tests and the benchmark).
"""
from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAS_NUMBA = False

_ENV = os.environ.get("ECHOTOMO_BACKEND", "").strip().lower()
if _ENV not in ("", "numba", "numpy"):
    raise ValueError(f"ECHOTOMO_BACKEND must be 'numba' or 'numpy', got {_ENV!r}")
if _ENV == "numba" and not HAS_NUMBA:
    raise ImportError("ECHOTOMO_BACKEND=numba but numba is not importable")

_active = _ENV or ("numba" if HAS_NUMBA else "numpy")


def get_backend() -> str:
    return _active


def set_backend(name: str) -> str:
    """Switch the active kernel backend; returns the previous one."""
    global _active
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ImportError("numba backend requested but numba is not importable")
    prev, _active = _active, name
    return prev


def kernels():
    """Module implementing ``trace_batch`` for the active backend."""
    if _active == "numba":
        from . import _kernels_numba as mod
    else:
        from . import _kernels_numpy as mod
    return mod
