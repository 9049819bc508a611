"""Backend selection for the per-pixel kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Setting ``ADDNET_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("ADDNET_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels
    else:
        BACKEND = "cython"
else:
    _impl = _pykernels

fill_convex = _impl.fill_convex
blur_separable = _impl.blur_separable
warp_bilinear = _impl.warp_bilinear


def available_backends():
    """Map backend name to module for every backend importable in this process."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
