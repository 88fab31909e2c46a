"""Backend switch for the numeric kernels.

Set ``COUNTLAB_DISABLE_NUMBA=1`` to force the pure-numpy code paths, e.g. for
debugging or on platforms without an LLVM toolchain.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "COUNTLAB_DISABLE_NUMBA"


def numba_enabled():
    """True when kernels should dispatch to the jitted implementations."""
    if not HAVE_NUMBA:
        return False
    return os.environ.get(ENV_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or an identity decorator without numba."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
