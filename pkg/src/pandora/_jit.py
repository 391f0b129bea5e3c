"""Optional numba acceleration.

Set ``PANDORA_DISABLE_NUMBA=1`` to force the pure-numpy kernels.
"""
import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAVE_NUMBA = False

NUMBA_DISABLED = os.environ.get("PANDORA_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}
USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def optional_njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise.

    The compiled function is always built when numba is importable so the
    benchmark and cross-backend tests can reach it even with the env flag set.
    """

    def decorator(func):
        if HAVE_NUMBA:
            return _njit(*args, **kwargs)(func)
        return func

    return decorator
