# cython: language_level=3
"""Compiled twins of the kernels in ``_fallback``.

Results must be bit-identical to the numpy versions; the floating-point
expressions below mirror their operation order exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, copysign
from libc.stdint cimport int8_t, int16_t, int32_t, uint8_t

cnp.import_array()

NAME = "cython"

# rows of w processed together in int_gemm; each x row is streamed once per group
cdef enum:
    WTILE = 4


cdef inline double _round_half_away(double u) nogil:
    cdef double a = fabs(u)
    cdef double f = floor(a)
    if a - f >= 0.5:
        f += 1.0
    return copysign(f, u)


def round_half_away(u):
    arr = np.asarray(u, dtype=np.float64)
    cdef double[::1] flat = np.ascontiguousarray(arr).reshape(-1)
    out = np.empty(flat.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(flat.shape[0]):
        o[i] = _round_half_away(flat[i])
    return out.reshape(arr.shape)


def pack_int4(values):
    cdef const int8_t[:, ::1] v = np.ascontiguousarray(values, dtype=np.int8)
    cdef Py_ssize_t rows = v.shape[0], cols = v.shape[1]
    cdef Py_ssize_t nbytes = (cols + 1) // 2
    out = np.zeros((rows, nbytes), dtype=np.uint8)
    cdef uint8_t[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef uint8_t lo, hi
    with nogil:
        for i in range(rows):
            for j in range(cols // 2):
                lo = <uint8_t>(v[i, 2 * j] + 8)
                hi = <uint8_t>(v[i, 2 * j + 1] + 8)
                o[i, j] = lo | (hi << 4)
            if cols % 2:
                o[i, nbytes - 1] = <uint8_t>(v[i, cols - 1] + 8)
    return out


def unpack_int4(data, Py_ssize_t cols):
    cdef const uint8_t[:, ::1] d = np.ascontiguousarray(data, dtype=np.uint8)
    cdef Py_ssize_t rows = d.shape[0]
    out = np.empty((rows, cols), dtype=np.int8)
    cdef int8_t[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef uint8_t b
    with nogil:
        for i in range(rows):
            for j in range(cols):
                b = d[i, j >> 1]
                if j & 1:
                    o[i, j] = <int8_t>(b >> 4) - 8
                else:
                    o[i, j] = <int8_t>(b & 0x0F) - 8
    return out


def int_gemm(x, w):
    """Tiled ``x @ w.T`` over int8 operands with int32 accumulation."""
    cdef const int8_t[:, ::1] a = np.ascontiguousarray(x, dtype=np.int8)
    cdef const int8_t[:, ::1] b = np.ascontiguousarray(w, dtype=np.int8)
    cdef Py_ssize_t t = a.shape[0], k = a.shape[1], n = b.shape[0]
    out = np.zeros((t, n), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    cdef Py_ssize_t i, j, p, jj, jend
    cdef int32_t s0, s1, s2, s3
    cdef int16_t xv
    with nogil:
        for i in range(t):
            j = 0
            while j + WTILE <= n:
                s0 = 0
                s1 = 0
                s2 = 0
                s3 = 0
                for p in range(k):
                    xv = a[i, p]
                    s0 += xv * b[j, p]
                    s1 += xv * b[j + 1, p]
                    s2 += xv * b[j + 2, p]
                    s3 += xv * b[j + 3, p]
                o[i, j] = s0
                o[i, j + 1] = s1
                o[i, j + 2] = s2
                o[i, j + 3] = s3
                j += WTILE
            for jj in range(j, n):
                s0 = 0
                for p in range(k):
                    s0 += a[i, p] * b[jj, p]
                o[i, jj] = s0
    return out


cdef inline void _scale_zero(const float[:, ::1] x, Py_ssize_t i, const Py_ssize_t[::1] idx,
                             double levels, float* scale, float* zero) nogil:
    cdef Py_ssize_t j, nb = idx.shape[0]
    cdef float lo, hi, v, s
    if nb == 0:
        scale[0] = 1.0
        zero[0] = 0.0
        return
    lo = x[i, idx[0]]
    hi = lo
    for j in range(1, nb):
        v = x[i, idx[j]]
        if v < lo:
            lo = v
        if v > hi:
            hi = v
    s = <float>((<double>hi - <double>lo) / levels)
    if s == 0:
        s = 1.0
    scale[0] = s
    zero[0] = lo


cdef inline int8_t _code(float v, float zero, float scale, double half) nogil:
    cdef double q = _round_half_away((<double>v - <double>zero) / <double>scale) - half
    if q < -half:
        q = -half
    elif q > half - 1:
        q = half - 1
    return <int8_t>q


def _quantize(x, const Py_ssize_t[::1] base_idx, int bits, bint pack):
    cdef const float[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef Py_ssize_t t = xv.shape[0], nb = base_idx.shape[0]
    cdef double levels = (1 << bits) - 1
    cdef double half = 1 << (bits - 1)
    scale_arr = np.empty(t, dtype=np.float32)
    zero_arr = np.empty(t, dtype=np.float32)
    cdef float[::1] sc = scale_arr
    cdef float[::1] ze = zero_arr
    cdef Py_ssize_t width = (nb + 1) // 2 if pack else nb
    stored = np.zeros((t, width), dtype=np.uint8 if pack else np.int8)
    cdef uint8_t[:, ::1] sp
    cdef int8_t[:, ::1] si
    if pack:
        sp = stored
    else:
        si = stored
    cdef Py_ssize_t i, j
    cdef float s, z
    cdef int8_t c
    with nogil:
        for i in range(t):
            _scale_zero(xv, i, base_idx, levels, &sc[i], &ze[i])
            s = sc[i]
            z = ze[i]
            for j in range(nb):
                c = _code(xv[i, base_idx[j]], z, s, half)
                if pack:
                    if j & 1:
                        sp[i, j >> 1] |= <uint8_t>((c + 8) << 4)
                    else:
                        sp[i, j >> 1] = <uint8_t>(c + 8)
                else:
                    si[i, j] = c
    return stored, scale_arr, zero_arr


def quantize_rows(x, int bits):
    x = np.ascontiguousarray(x, dtype=np.float32)
    idx = np.arange(x.shape[1], dtype=np.intp)
    return _quantize(x, idx, bits, False)


def quantize_split(x, base_idx, out_idx, int bits):
    """One pass per token: min/max over base columns, quantize them, move outliers."""
    cdef const float[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef const Py_ssize_t[::1] oi = np.ascontiguousarray(out_idx, dtype=np.intp)
    stored, scale, zero = _quantize(xv, np.ascontiguousarray(base_idx, dtype=np.intp), bits, bits == 4)
    cdef Py_ssize_t t = xv.shape[0], no = oi.shape[0], i, j
    x_out = np.empty((t, no), dtype=np.float32)
    cdef float[:, ::1] xo = x_out
    with nogil:
        for i in range(t):
            for j in range(no):
                xo[i, j] = xv[i, oi[j]]
    return stored, scale, zero, x_out


def epilogue(acc, scale_act, zero_act, scale_w, wreduced, half, addend=None, bias=None):
    cdef const int32_t[:, ::1] a = np.ascontiguousarray(acc, dtype=np.int32)
    cdef const float[::1] sa = np.ascontiguousarray(scale_act, dtype=np.float32)
    cdef const float[::1] za = np.ascontiguousarray(zero_act, dtype=np.float32)
    cdef const float[::1] sw = np.ascontiguousarray(scale_w, dtype=np.float32)
    cdef const float[::1] wr = np.ascontiguousarray(wreduced, dtype=np.float32)
    cdef float h = half
    cdef Py_ssize_t t = a.shape[0], n = a.shape[1], i, j
    cdef bint has_add = addend is not None
    cdef bint has_bias = bias is not None
    cdef const float[:, ::1] ad
    cdef const float[::1] bi
    if has_add:
        ad = np.ascontiguousarray(addend, dtype=np.float32)
    if has_bias:
        bi = np.ascontiguousarray(bias, dtype=np.float32)
    out = np.empty((t, n), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef float v, shift
    with nogil:
        for i in range(t):
            shift = za[i] + h * sa[i]
            for j in range(n):
                v = (<float>a[i, j] * sa[i]) * sw[j]
                v = v + shift * wr[j]
                if has_add:
                    v = v + ad[i, j]
                if has_bias:
                    v = v + bi[j]
                o[i, j] = v
    return out
