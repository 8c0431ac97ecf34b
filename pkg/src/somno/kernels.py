"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``SOMNO_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("SOMNO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py
    else:
        BACKEND = "cython"
else:
    _impl = _kernels_py

fir_decimate = _impl.fir_decimate
onepole_lowpass = _impl.onepole_lowpass

__all__ = ["BACKEND", "fir_decimate", "onepole_lowpass"]
