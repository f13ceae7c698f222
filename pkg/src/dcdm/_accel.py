"""Numba switch.

Set ``DCDM_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba is not
importable the numpy path is used silently.
"""
import os

_FLAG = os.environ.get("DCDM_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG in ("1", "true", "yes", "on")

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba ships with the env
    _nb = None

HAVE_NUMBA = _nb is not None
USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(func):
    """Compile ``func`` with numba when available; otherwise return it unchanged."""
    if not HAVE_NUMBA:
        return func
    return _nb.njit(cache=True, fastmath=False)(func)
