"""Numba / pure-NumPy backend selection for the hot kernels.

The splatting kernels are written as plain Python loops over NumPy arrays and
compiled with numba's ``@njit`` by default.  Setting the environment variable
``SUPERSPLAT_NUMBA=0`` (or running without numba installed) selects the
uncompiled pure-NumPy path instead; results are identical either way, only
speed differs.

``SUPERSPLAT_THREADS`` caps render parallelism (default: hardware
concurrency).  Tiles are distributed over a thread pool; the compiled kernels
release the GIL, so threads scale on the JIT path.
"""

import os

import numpy as np


def _env_flag(name, default=True):
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() not in ("0", "false", "no", "off")


NUMBA_ENABLED = _env_flag("SUPERSPLAT_NUMBA", default=True)

if NUMBA_ENABLED:
    try:
        from numba import njit as _numba_njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return _numba_njit(*args, **kwargs)
else:
    def njit(*args, **kwargs):
        def wrap(func):
            return func
        if args and callable(args[0]):
            return args[0]
        return wrap


def pure(func):
    """Return the uncompiled Python implementation of a kernel."""
    return getattr(func, "py_func", func)


def render_threads():
    """Thread count for tile-parallel passes (capped by SUPERSPLAT_THREADS)."""
    hw = os.cpu_count() or 1
    raw = os.environ.get("SUPERSPLAT_THREADS")
    if raw is None:
        return hw
    try:
        n = int(raw)
    except ValueError:
        return hw
    return max(1, min(n, hw))


FLOAT = np.float64
