"""Optional numba acceleration.

Set ``CONGESTION_HARVESTER_NUMBA=0`` to force the pure-numpy kernels even when
numba is importable.
"""
from __future__ import annotations

import os

ENV_FLAG = "CONGESTION_HARVESTER_NUMBA"

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def numba_requested() -> bool:
    value = os.environ.get(ENV_FLAG, "1").strip().lower()
    return value not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and numba_requested()


def njit(func):
    """``numba.njit(cache=True)`` when numba is present, else the plain function."""
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True)(func)
