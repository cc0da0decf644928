"""Numba switch.

Set ``HEAPRECALL_DISABLE_NUMBA=1`` (or have numba missing) to run every hot
kernel through its pure-numpy counterpart instead.
"""

import os

_flag = os.environ.get("HEAPRECALL_DISABLE_NUMBA", "").strip().lower()
DISABLED = _flag not in ("", "0", "false", "no")

try:
    if DISABLED:
        raise ImportError
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    _numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(func):
        return func

    return wrapper


def backend():
    return "numba" if HAVE_NUMBA else "numpy"
