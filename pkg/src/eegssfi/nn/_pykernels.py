"""Numpy implementations of the hot kernels (fallback for ``_ckernels``).

All arrays are NHWC. The 3x3 patch layout of ``im2col`` is (kh, kw, c), which
matches ``w.reshape(9 * C, F)`` for weights stored as (3, 3, C, F).
Accumulation order in ``col2im`` is by patch offset k = 0..8 so both backends
produce bit-identical sums.
"""

import numpy as np


def im2col3x3(x):
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def col2im3x3(dcols, n, h, w, c):
    d = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w, :] += d[:, :, :, 3 * i + j, :]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :])


def maxpool2x2_forward(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    # np.argmax returns the first maximum: ties go to the earliest row-major slot
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(dout, idx):
    n, ho, wo, c = dout.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.int8)
    d = np.where(onehot, dout[..., None], 0).astype(dout.dtype)
    d = d.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(d.reshape(n, 2 * ho, 2 * wo, c))
