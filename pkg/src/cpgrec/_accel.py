"""Numba detection and the switch between jitted and pure-numpy kernels.

Set ``CPGREC_NO_NUMBA=1`` to force the numpy path even when numba is
importable. The choice is made once, at import time.
"""
import logging
import os

logger = logging.getLogger(__name__)


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


try:
    import warnings

    import numba

    warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_flag("CPGREC_NO_NUMBA")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda f: f


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def set_threads(n):
    """Bound numba's worker pool; a no-op on the numpy path."""
    n = max(1, int(n))
    if HAVE_NUMBA:
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    return n


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
