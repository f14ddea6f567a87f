"""Hot-loop kernels with an import-time backend choice.

The compiled Cython module is used when it was built; otherwise (or when
``AGREELAB_PURE_PYTHON=1`` is set) the numpy versions are used. Both expose
the same four functions and agree to floating-point rounding.
"""
from __future__ import annotations

import os

import numpy as np

from agreelab import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("AGREELAB_PURE_PYTHON"):
    try:
        from agreelab import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels


def _c(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def elman_scan(xw, wh):
    return _impl.elman_scan(_c(xw), _c(wh))


def elman_scan_backward(dH, slope, wh):
    return _impl.elman_scan_backward(_c(dH), _c(slope), _c(wh))


def kendall_counts(a, b):
    return _impl.kendall_counts(_c(a), _c(b))


def nearest_distances(X):
    return _impl.nearest_distances(_c(X))


def backend_module(name: str):
    """Return the kernel module for ``name`` ('python' or 'compiled')."""
    if name == "python":
        return _pykernels
    from agreelab import _ckernels

    return _ckernels
