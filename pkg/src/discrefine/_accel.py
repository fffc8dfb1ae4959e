"""Backend selection for the numeric kernels.

Set ``DISCREFINE_DISABLE_NUMBA=1`` to force the pure numpy/scipy path. The
flag is read once at import time.
"""
import os

_DISABLED = os.environ.get("DISCREFINE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


USE_NUMBA = HAS_NUMBA and not _DISABLED


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
