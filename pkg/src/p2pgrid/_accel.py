"""Numba switch.

Set ``P2PGRID_DISABLE_NUMBA=1`` to force the pure-numpy kernels; the flag is
read once at import time.
"""
import os

_FLAG = os.environ.get("P2PGRID_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def maybe_njit(func):
    """``numba.njit(cache=True)`` when enabled, else the plain function."""
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
