"""Select the compiled rough-path kernels when built, else the NumPy fallback.

Set ``CNSTN_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py as fallback

try:
    if os.environ.get("CNSTN_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _kernels as compiled
except ImportError:
    compiled = None

BACKEND = "cython" if compiled is not None else "python"
_impl = compiled if compiled is not None else fallback


def _c(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def pvar_power(x, p: float) -> float:
    return float(_impl.pvar_power(_c(x), float(p)))


def control_table(x, p: float) -> np.ndarray:
    return np.asarray(_impl.control_table(_c(x), float(p)))


def chen_defect(z, second) -> float:
    return float(_impl.chen_defect(_c(z), _c(second)))
