"""Numba switch for the hot kernels.

Set ``FSPNET_NUMBA=0`` before import to run every kernel through its
pure-numpy path. Numba kernels and numpy kernels share the same scalar
arithmetic helpers, so both paths evaluate identical formulas.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _flag(value):
    return value.strip().lower() not in ("0", "false", "no", "off", "")


USE_NUMBA = numba is not None and _flag(os.environ.get("FSPNET_NUMBA", "1"))


def njit(*args, **kwargs):
    """``numba.njit`` when numba is available, else an identity decorator.

    The decorated function is always compiled when numba is importable so
    tests can compare both paths in one process; ``USE_NUMBA`` only picks
    which path the public dispatchers call.
    """
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)

    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def backend():
    return "numba" if USE_NUMBA else "numpy"
