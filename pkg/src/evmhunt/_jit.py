"""Numba switch for the hot kernels.

Set ``EVMHUNT_DISABLE_JIT=1`` to run every kernel as plain Python/numpy.
The flag is read once at import time.
"""

import os

_FLAG = os.environ.get("EVMHUNT_DISABLE_JIT", "").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAS_NUMBA = False

JIT_ENABLED = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise a no-op decorator.

    Usable bare (``@njit``) or with options (``@njit(cache=True)``).
    """
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        fn = args[0]
        return numba.njit(cache=True)(fn) if JIT_ENABLED else fn

    def wrap(fn):
        if not JIT_ENABLED:
            return fn
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)(fn)

    return wrap


def python_impl(fn):
    """Return the uncompiled Python function behind a kernel."""
    return getattr(fn, "py_func", fn)
