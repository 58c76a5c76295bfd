"""Kernel backend selection.

Hot kernels are written once as plain loops and compiled with numba when it
is importable. Setting ``NOISYPROP_BACKEND=numpy`` (read at import time)
forces the vectorised numpy fallbacks instead.
"""

import os

_requested = os.environ.get("NOISYPROP_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"NOISYPROP_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _requested == "numba"
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator.

    The jitted function is always built when numba is installed so that the
    benchmark and the equivalence tests can compare both paths regardless of
    which one is active.
    """
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
