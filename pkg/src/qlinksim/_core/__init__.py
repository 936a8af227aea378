"""Propagation kernels.

The compiled extension is used when it was built; set
``QLINKSIM_PURE_PYTHON=1`` to force the NumPy fallback.
"""

import os

from . import _rk4_py

if os.environ.get("QLINKSIM_PURE_PYTHON", "") not in ("", "0"):
    kernel = _rk4_py
    BACKEND = "python"
else:
    try:
        from . import _rk4 as kernel
        BACKEND = "cython"
    except ImportError:
        kernel = _rk4_py
        BACKEND = "python"

python_kernel = _rk4_py

__all__ = ["kernel", "python_kernel", "BACKEND"]
