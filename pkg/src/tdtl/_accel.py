"""Numba switch for the hot kernels.

Set ``TDTL_DISABLE_NUMBA=1`` before import to run every kernel through its
pure-numpy twin. Both paths are always importable so they can be compared.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = numba is not None and not _flag("TDTL_DISABLE_NUMBA")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def pick(fast, slow):
    """Return the kernel selected by the environment flag."""
    return fast if USE_NUMBA else slow
