"""Boundary kernels, compiled when the Cython extension is built, Python otherwise.

Set ``MSA_UNET3P_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("MSA_UNET3P_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

surface_mask = _impl.surface_mask
trace_contours = _impl.trace_contours
