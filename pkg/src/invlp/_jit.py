"""Optional numba acceleration.

Set ``INVLP_DISABLE_NUMBA=1`` to run every kernel as plain numpy code.
"""
import os

USE_NUMBA = os.environ.get("INVLP_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

JIT_OPTIONS = {"nogil": True, "cache": True, "fastmath": False, "error_model": "numpy"}


def maybe_njit(func):
    """``numba.njit`` when enabled, identity otherwise."""
    if USE_NUMBA:
        return numba.njit(**JIT_OPTIONS)(func)
    return func
