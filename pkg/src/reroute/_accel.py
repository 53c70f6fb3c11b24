"""
numba shim. Set REROUTE_NUMBA=0 to run the pure-numpy kernels instead,
e.g. for debugging with the Python interpreter or on machines without numba.
"""

import os

_flag = os.environ.get("REROUTE_NUMBA", "1").strip().lower()
JIT_REQUESTED = _flag not in ("0", "false", "no", "off")

try:
    if not JIT_REQUESTED:
        raise ImportError
    from numba import njit as _njit

    JIT_ENABLED = True
except ImportError:
    JIT_ENABLED = False


def njit(func=None, **kwargs):
    """`numba.njit` when enabled, identity decorator otherwise."""
    if JIT_ENABLED:
        opts = dict(cache=True, nogil=True)
        opts.update(kwargs)
        return _njit(func, **opts) if func is not None else _njit(**opts)
    if func is not None:
        return func

    def wrapper(f):
        return f

    return wrapper
