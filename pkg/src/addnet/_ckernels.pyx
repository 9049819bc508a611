# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel kernels. Semantics mirror ``addnet._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor, fmin, fmax, INFINITY

cnp.import_array()

cdef double EPS = 1e-9


def fill_convex(hull, Py_ssize_t height, Py_ssize_t width):
    cdef double[:, ::1] pts = np.ascontiguousarray(hull, dtype=np.float64)
    out_arr = np.zeros((height, width), dtype=np.uint8)
    if height == 0 or width == 0:
        return out_arr
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t k = pts.shape[0]
    cdef Py_ssize_t r, i, j, c, c_lo, c_hi
    cdef double y, lo, hi, x0, y0, x1, y1, ya, yb, t, xs
    for r in range(height):
        y = <double>r
        lo = INFINITY
        hi = -INFINITY
        for i in range(k):
            j = i + 1 if i + 1 < k else 0
            x0 = pts[i, 0]
            y0 = pts[i, 1]
            x1 = pts[j, 0]
            y1 = pts[j, 1]
            ya = fmin(y0, y1)
            yb = fmax(y0, y1)
            if y < ya - EPS or y > yb + EPS:
                continue
            if yb - ya <= EPS:
                lo = fmin(lo, fmin(x0, x1))
                hi = fmax(hi, fmax(x0, x1))
            else:
                t = (y - y0) / (y1 - y0)
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
                xs = x0 + t * (x1 - x0)
                lo = fmin(lo, xs)
                hi = fmax(hi, xs)
        if lo == INFINITY:
            continue
        lo = ceil(lo - EPS)
        hi = floor(hi + EPS)
        if lo < 0:
            lo = 0
        if hi > width - 1:
            hi = width - 1
        c_lo = <Py_ssize_t>lo
        c_hi = <Py_ssize_t>hi
        for c in range(c_lo, c_hi + 1):
            out[r, c] = 1
    return out_arr


cdef inline Py_ssize_t _reflect(Py_ssize_t idx, Py_ssize_t n) nogil:
    cdef Py_ssize_t period = 2 * n
    idx = idx % period
    if idx < 0:
        idx += period
    if idx >= n:
        idx = period - 1 - idx
    return idx


def blur_separable(image, kernel):
    cdef double[:, ::1] src = np.ascontiguousarray(image, dtype=np.float64)
    cdef double[::1] ker = np.ascontiguousarray(kernel, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    cdef Py_ssize_t klen = ker.shape[0]
    cdef Py_ssize_t rad = klen // 2
    tmp_arr = np.empty((h, w), dtype=np.float64)
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t[::1] rows = np.empty(h + klen, dtype=np.intp)
    cdef Py_ssize_t[::1] cols = np.empty(w + klen, dtype=np.intp)
    cdef Py_ssize_t r, c, q, src_row
    cdef double acc, kq
    for r in range(h + klen - 1):
        rows[r] = _reflect(r - rad, h)
    for c in range(w + klen - 1):
        cols[c] = _reflect(c - rad, w)
    with nogil:
        # vertical pass row by row keeps memory access contiguous
        for r in range(h):
            for c in range(w):
                tmp[r, c] = 0.0
            for q in range(klen):
                src_row = rows[r + q]
                kq = ker[q]
                for c in range(w):
                    tmp[r, c] = tmp[r, c] + src[src_row, c] * kq
        for r in range(h):
            for c in range(w):
                acc = 0.0
                for q in range(klen):
                    acc = acc + tmp[r, cols[c + q]] * ker[q]
                out[r, c] = acc
    return out_arr


def warp_bilinear(image, inverse, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef double[:, :, ::1] src = np.ascontiguousarray(image, dtype=np.float64)
    cdef double[:, ::1] m = np.ascontiguousarray(inverse, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], ch = src.shape[2]
    out_arr = np.zeros((out_h, out_w, ch), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t r, c, k, ix, iy
    cdef double sx, sy, fx, fy, ax, ay, w00, w01, w10, w11, v
    with nogil:
        for r in range(out_h):
            for c in range(out_w):
                sx = m[0, 0] * c + m[0, 1] * r + m[0, 2]
                sy = m[1, 0] * c + m[1, 1] * r + m[1, 2]
                if sx <= -1.0 or sy <= -1.0 or sx >= w or sy >= h:
                    continue
                fx = floor(sx)
                fy = floor(sy)
                ax = sx - fx
                ay = sy - fy
                ix = <Py_ssize_t>fx
                iy = <Py_ssize_t>fy
                w00 = (1 - ax) * (1 - ay)
                w01 = ax * (1 - ay)
                w10 = (1 - ax) * ay
                w11 = ax * ay
                for k in range(ch):
                    v = 0.0
                    if iy >= 0 and ix >= 0:
                        v = v + src[iy, ix, k] * w00
                    if iy >= 0 and ix + 1 < w:
                        v = v + src[iy, ix + 1, k] * w01
                    if iy + 1 < h and ix >= 0:
                        v = v + src[iy + 1, ix, k] * w10
                    if iy + 1 < h and ix + 1 < w:
                        v = v + src[iy + 1, ix + 1, k] * w11
                    out[r, c, k] = v
    return out_arr
