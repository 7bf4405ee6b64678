"""Kernel backend selection.

The compiled extension is used when importable; set ``EEGSSFI_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("EEGSSFI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels


def _c(x):
    return np.ascontiguousarray(x)


def im2col3x3(x):
    return _impl.im2col3x3(_c(x))


def col2im3x3(dcols, n, h, w, c):
    return _impl.col2im3x3(_c(dcols), n, h, w, c)


def maxpool2x2_forward(x):
    return _impl.maxpool2x2_forward(_c(x))


def maxpool2x2_backward(dout, idx):
    return _impl.maxpool2x2_backward(_c(dout), _c(idx))


def use_backend(name: str) -> str:
    """Switch backends at runtime (tests and benchmarks); returns the previous one."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels

        _impl = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return prev
