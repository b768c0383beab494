"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the NumPy
implementation is imported. Set ``HURDLECAST_PURE_PYTHON=1`` to force the
fallback (used by the benchmark and the backend-parity tests).
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if not os.environ.get("HURDLECAST_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend

BACKEND = "cython" if compiled_backend is not None else "python"
bspline_design = _active.bspline_design
threshold_losses = _active.threshold_losses
