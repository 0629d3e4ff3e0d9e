"""Kernel backend selection.

The compiled Cython extension is preferred when it imports cleanly; the
numpy module provides identical semantics otherwise. Set DGMR_BACKEND to
"python" to force the fallback or "compiled" to require the extension.
"""

import os

from . import kernels_py

_choice = os.environ.get("DGMR_BACKEND", "auto").lower()

if _choice not in ("auto", "python", "compiled"):
    raise RuntimeError(
        "DGMR_BACKEND must be one of auto/python/compiled, got %r" % _choice
    )

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "compiled":
            raise RuntimeError(
                "DGMR_BACKEND=compiled but the dgmr.backend._kernels "
                "extension is not built; reinstall with a C compiler "
                "available or use DGMR_BACKEND=python"
            )
        _impl = None

if _impl is None:
    _impl = kernels_py
    BACKEND_NAME = "python"
else:
    BACKEND_NAME = "compiled"

quat_mul = _impl.quat_mul
quat_mul_backward = _impl.quat_mul_backward
quat_rotate = _impl.quat_rotate
quat_rotate_backward = _impl.quat_rotate_backward
quat_to_mat = _impl.quat_to_mat
quat_to_mat_backward = _impl.quat_to_mat_backward
aa_to_quat = _impl.aa_to_quat
aa_to_quat_backward = _impl.aa_to_quat_backward
lbs_forward = _impl.lbs_forward
lbs_backward = _impl.lbs_backward
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
gauss_maps = _impl.gauss_maps

__all__ = [
    "BACKEND_NAME",
    "kernels_py",
    "quat_mul",
    "quat_mul_backward",
    "quat_rotate",
    "quat_rotate_backward",
    "quat_to_mat",
    "quat_to_mat_backward",
    "aa_to_quat",
    "aa_to_quat_backward",
    "lbs_forward",
    "lbs_backward",
    "attention_forward",
    "attention_backward",
    "gauss_maps",
]
