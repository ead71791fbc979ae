"""Kernel backend selection: numba-compiled loops or pure-numpy fallbacks.

The hot inner loops (tile rasterization forward/backward, ray casting) exist
in two implementations. The active one is picked from the UNISPLAT_BACKEND
environment variable at import time and can be overridden at runtime with
set_backend(), which the cross-checking tests and the benchmark rely on.

Values: "numba" (default when numba imports), "numpy".
"""

from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_VALID = ("numba", "numpy")


def _from_env() -> str:
    raw = os.environ.get("UNISPLAT_BACKEND", "").strip().lower()
    if raw in ("", "auto"):
        return "numba" if _HAVE_NUMBA else "numpy"
    if raw not in _VALID:
        raise ValueError(f"UNISPLAT_BACKEND must be one of {_VALID}, got {raw!r}")
    if raw == "numba" and not _HAVE_NUMBA:
        raise ImportError("UNISPLAT_BACKEND=numba but numba is not importable")
    return raw


_active = _from_env()


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    name = name.strip().lower()
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ImportError("numba backend requested but numba is not importable")
    _active = name


def numba_active() -> bool:
    return _active == "numba"
