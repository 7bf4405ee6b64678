# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels`` (same contracts)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n * h * w, 9 * c), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, i, j, di, dj, ch, row, si, sj, base
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    for di in range(3):
                        si = i + di - 1
                        if si < 0 or si >= h:
                            continue
                        for dj in range(3):
                            sj = j + dj - 1
                            if sj < 0 or sj >= w:
                                continue
                            base = (3 * di + dj) * c
                            for ch in range(c):
                                cols[row, base + ch] = x[b, si, sj, ch]
    return out


def col2im3x3(real[:, ::1] dcols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t k, di, dj, b, i, j, ch, row, si, sj, base
    with nogil:
        # k-outer order keeps the per-pixel summation order of the numpy path
        for k in range(9):
            di = k // 3
            dj = k % 3
            base = k * c
            for b in range(n):
                for i in range(h):
                    si = i + di - 1
                    if si < 0 or si >= h:
                        continue
                    for j in range(w):
                        sj = j + dj - 1
                        if sj < 0 or sj >= w:
                            continue
                        row = (b * h + i) * w + j
                        for ch in range(c):
                            dx[b, si, sj, ch] += dcols[row, base + ch]
    return out


def maxpool2x2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], ho = x.shape[1] // 2, wo = x.shape[2] // 2, c = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, ho, wo, c), dtype=dtype)
    idx_arr = np.empty((n, ho, wo, c), dtype=np.int8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, i, j, ch
    cdef real best, v
    cdef cnp.int8_t arg
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * i, 2 * j, ch]
                        arg = 0
                        v = x[b, 2 * i, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[b, 2 * i + 1, 2 * j, ch]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[b, 2 * i + 1, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            arg = 3
                        out[b, i, j, ch] = best
                        idx[b, i, j, ch] = arg
    return out_arr, idx_arr


def maxpool2x2_backward(real[:, :, :, ::1] dout, cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, 2 * ho, 2 * wo, c), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, i, j, ch
    cdef cnp.int8_t a
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        a = idx[b, i, j, ch]
                        dx[b, 2 * i + a // 2, 2 * j + a % 2, ch] = dout[b, i, j, ch]
    return out
