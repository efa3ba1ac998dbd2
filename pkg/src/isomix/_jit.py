"""Optional numba acceleration.

Set ``ISOMIX_DISABLE_JIT=1`` to run every kernel as plain Python/numpy.
Both paths draw from the same ``numpy.random.Generator`` streams, so a
given seed yields the same chain either way.
"""
import os

USE_NUMBA = os.environ.get("ISOMIX_DISABLE_JIT", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

if USE_NUMBA:
    def njit(func):
        return numba.njit(cache=True, nogil=True)(func)
else:
    def njit(func):
        return func


def python_version(func):
    """Return the uncompiled implementation of a kernel."""
    return getattr(func, "py_func", func)
