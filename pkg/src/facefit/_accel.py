"""Numba switch.

Hot kernels are written twice: an ``@njit`` loop version and a vectorised
numpy version.  ``FACEFIT_NO_NUMBA=1`` (or numba missing) selects numpy.
"""
import os

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_FALSY = ("", "0", "false", "no", "off")


def numba_enabled():
    flag = os.environ.get("FACEFIT_NO_NUMBA", "").strip().lower()
    return HAS_NUMBA and flag in _FALSY


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or a no-op decorator without numba."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAS_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def set_threads(n=None):
    """Set numba's worker count from ``n`` or ``FACEFIT_THREADS``."""
    if not HAS_NUMBA:
        return
    if n is None:
        env = os.environ.get("FACEFIT_THREADS")
        if not env:
            return
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)


def pick(nb_impl, np_impl):
    """Return the kernel for the active backend (checked at call time)."""
    return nb_impl if numba_enabled() else np_impl
