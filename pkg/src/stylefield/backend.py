"""Kernel backend selection.

The hot numeric kernels in :mod:`stylefield.kernels` exist in two versions:
numba ``@njit`` loops and pure-numpy vectorized fallbacks.  Selection happens
once at import time via the ``STYLEFIELD_NUMBA`` environment variable:

* ``STYLEFIELD_NUMBA=0``  -- force the numpy path (no numba import at all)
* ``STYLEFIELD_NUMBA=1``  -- require numba; ImportError if it is missing
* unset                   -- numba when importable, numpy otherwise
"""

import os

_flag = os.environ.get("STYLEFIELD_NUMBA", "").strip()

if _flag == "0":
    HAS_NUMBA = False
elif _flag == "1":
    import numba  # noqa: F401  (hard requirement when explicitly requested)

    HAS_NUMBA = True
else:
    try:
        import numba  # noqa: F401

        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"
