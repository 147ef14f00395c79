"""Backend selection for the hot kernels.

Every hot kernel exists twice: a numba ``@njit`` loop and a vectorized numpy
version. ``AGENTSIM_BACKEND`` picks the default (``numba`` or ``numpy``);
``AGENTSIM_DISABLE_NUMBA=1`` forces numpy. Callers that want a specific path
regardless of the environment pass ``backend=`` explicitly.
"""

from __future__ import annotations

import os

try:
    import numba as _numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAS_NUMBA = False

BACKENDS = ("numba", "numpy")


def _default_backend() -> str:
    if os.environ.get("AGENTSIM_DISABLE_NUMBA", "") not in ("", "0"):
        return "numpy"
    choice = os.environ.get("AGENTSIM_BACKEND", "numba").strip().lower()
    if choice not in BACKENDS:
        raise ValueError(f"AGENTSIM_BACKEND must be one of {BACKENDS}, got {choice!r}")
    if choice == "numba" and not HAS_NUMBA:
        return "numpy"
    return choice


DEFAULT_BACKEND = _default_backend()


def resolve(backend: str | None) -> str:
    if backend is None:
        return DEFAULT_BACKEND
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend


if HAS_NUMBA:

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return _numba.njit(*args, **kwargs)

else:  # pragma: no cover

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
