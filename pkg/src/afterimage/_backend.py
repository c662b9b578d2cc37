"""Kernel backend selection.

Hot loops are written once as plain Python over numpy arrays and wrapped
with numba's njit when it is available.  Setting AFTERIMAGE_NUMBA=0 (or
"off"/"false"/"no") before import forces the pure-Python path, which runs
the same source uncompiled.  The flag is read once at import time.
"""

import os

__all__ = ["njit", "NUMBA_ENABLED"]


def _numba_wanted() -> bool:
    flag = os.environ.get("AFTERIMAGE_NUMBA", "").strip().lower()
    return flag not in ("0", "off", "false", "no")


def _identity_njit(*args, **kwargs):
    # mirror numba's dual calling convention: @njit and @njit(...)
    if args and callable(args[0]):
        return args[0]

    def wrap(fn):
        return fn

    return wrap


NUMBA_ENABLED = False
njit = _identity_njit

if _numba_wanted():
    try:
        from numba import njit  # noqa: F811

        NUMBA_ENABLED = True
    except ImportError:
        pass
