"""Kernel backend selection.

The Cython extension is used when it was built; otherwise, or when
``PRIVCXR_PURE_PYTHON`` is set to a non-empty value, the numpy fallback is
used. Both expose the same functions.
"""
from __future__ import annotations

import os
from types import ModuleType

from privcxr import _kernels_py


def _load_compiled() -> ModuleType | None:
    try:
        from privcxr import _kernels
    except ImportError:
        return None
    return _kernels


def available_backends() -> dict[str, ModuleType]:
    backends = {"numpy": _kernels_py}
    compiled = _load_compiled()
    if compiled is not None:
        backends["cython"] = compiled
    return backends


def _select() -> ModuleType:
    if os.environ.get("PRIVCXR_PURE_PYTHON"):
        return _kernels_py
    return _load_compiled() or _kernels_py


_impl = _select()
BACKEND: str = _impl.BACKEND

im2col = _impl.im2col
col2im = _impl.col2im
mish_forward = _impl.mish_forward
mish_backward = _impl.mish_backward
row_norms = _impl.row_norms
clip_rows = _impl.clip_rows
sum_rows = _impl.sum_rows
clip_sum = _impl.clip_sum
