# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: counter-based random streams, Poisson sampling and
direct 3-D cross-correlation, softplus. ``_fallback.py`` mirrors every function here
with the same signature and the same arithmetic."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, floor, fabs, lgamma
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t STREAM_C = 0xD1B54A32D192ED03ULL
cdef int DRAW_BITS = 20
cdef int64_t INVERSION_CAP = 200


cdef inline uint64_t mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double stream_uniform(uint64_t key, uint64_t idx, uint64_t draw) nogil:
    cdef uint64_t counter = (idx << DRAW_BITS) | draw
    cdef uint64_t z = mix64(mix64(counter * GOLDEN + STREAM_C) ^ key)
    return <double>(z >> 11) * (1.0 / 9007199254740992.0)


def uniforms(uint64_t key, Py_ssize_t n, uint64_t draw=0):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = stream_uniform(key, <uint64_t>i, draw)
    return out


cdef inline int64_t poisson_inversion(double lam, double u) nogil:
    cdef int64_t k = 0
    cdef double p = exp(-lam)
    cdef double cdf = p
    while u > cdf and k < INVERSION_CAP:
        k += 1
        p *= lam / k
        cdf += p
    return k


cdef inline int64_t poisson_ptrs(double lam, uint64_t key, uint64_t idx) nogil:
    cdef double slam = sqrt(lam)
    cdef double loglam = log(lam)
    cdef double b = 0.931 + 2.53 * slam
    cdef double a = -0.059 + 0.02483 * b
    cdef double invalpha = 1.1239 + 1.1328 / (b - 3.4)
    cdef double vr = 0.9277 - 3.6224 / (b - 2.0)
    cdef double U, V, us
    cdef int64_t k
    cdef uint64_t attempt = 0
    while True:
        U = stream_uniform(key, idx, 2 * attempt) - 0.5
        V = stream_uniform(key, idx, 2 * attempt + 1)
        attempt += 1
        us = 0.5 - fabs(U)
        if us <= 0.0:
            continue
        k = <int64_t>floor((2.0 * a / us + b) * U + lam + 0.43)
        if us >= 0.07 and V <= vr:
            return k
        if k < 0 or (us < 0.013 and V > us):
            continue
        if log(V) + log(invalpha) - log(a / (us * us) + b) <= -lam + k * loglam - lgamma(k + 1.0):
            return k


def poisson(const double[::1] lam, uint64_t key, double threshold):
    cdef Py_ssize_t n = lam.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef double r
    with nogil:
        for i in range(n):
            r = lam[i]
            if r == 0.0:
                o[i] = 0.0
            elif r < threshold:
                o[i] = <double>poisson_inversion(r, stream_uniform(key, <uint64_t>i, 0))
            else:
                o[i] = <double>poisson_ptrs(r, key, <uint64_t>i)
    return out


cdef inline Py_ssize_t _wide_len(Py_ssize_t P, Py_ssize_t tp_stride, Py_ssize_t wp,
                                 Py_ssize_t kt, Py_ssize_t kh, Py_ssize_t kw) nogil:
    return P - ((kt - 1) * tp_stride + (kh - 1) * wp + (kw - 1))


def conv3d_forward(const double[:, ::1] xflat, const double[:, :, :, :, ::1] w, tuple padded_shape):
    """Stride-1 correlation on the flattened padded grid ("wide" output of length L)."""
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1]
    cdef Py_ssize_t kt = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t hp = padded_shape[1], wp = padded_shape[2]
    cdef Py_ssize_t plane = hp * wp
    cdef Py_ssize_t L = _wide_len(xflat.shape[1], plane, wp, kt, kh, kw)
    out_arr = np.zeros((cout, L), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t co, ci, a, b, c, p
    cdef double wv, w00, w01, w02, w10, w11, w12, w20, w21, w22
    cdef double* o
    cdef const double* x
    cdef const double* x1
    cdef const double* x2
    with nogil:
        for co in range(cout):
            o = &out[co, 0]
            for ci in range(cin):
                for a in range(kt):
                    if kh == 3 and kw == 3:
                        w00 = w[co, ci, a, 0, 0]; w01 = w[co, ci, a, 0, 1]; w02 = w[co, ci, a, 0, 2]
                        w10 = w[co, ci, a, 1, 0]; w11 = w[co, ci, a, 1, 1]; w12 = w[co, ci, a, 1, 2]
                        w20 = w[co, ci, a, 2, 0]; w21 = w[co, ci, a, 2, 1]; w22 = w[co, ci, a, 2, 2]
                        x = &xflat[ci, a * plane]
                        x1 = x + wp
                        x2 = x + 2 * wp
                        for p in range(L):
                            o[p] += (w00 * x[p] + w01 * x[p + 1] + w02 * x[p + 2]
                                     + w10 * x1[p] + w11 * x1[p + 1] + w12 * x1[p + 2]
                                     + w20 * x2[p] + w21 * x2[p + 1] + w22 * x2[p + 2])
                    else:
                        for b in range(kh):
                            for c in range(kw):
                                wv = w[co, ci, a, b, c]
                                x = &xflat[ci, a * plane + b * wp + c]
                                for p in range(L):
                                    o[p] += wv * x[p]
    return out_arr


def conv3d_backward_input(const double[:, ::1] gwide, const double[:, :, :, :, ::1] w, tuple padded_shape):
    """Adjoint of :func:`conv3d_forward`: wide output gradient -> flat padded input gradient."""
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1]
    cdef Py_ssize_t kt = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t hp = padded_shape[1], wp = padded_shape[2]
    cdef Py_ssize_t plane = hp * wp
    cdef Py_ssize_t P = padded_shape[0] * plane
    cdef Py_ssize_t L = gwide.shape[1]
    cdef Py_ssize_t M = (kh - 1) * wp + (kw - 1)
    gx_arr = np.zeros((cin, P), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    # zero-extended gradient turns the scatter into a bounds-free gather
    gext_arr = np.zeros((cout, L + 2 * M), dtype=np.float64)
    gext_arr[:, M:M + L] = gwide
    cdef double[:, ::1] gext = gext_arr
    cdef Py_ssize_t co, ci, a, b, c, p, q
    cdef double wv, w00, w01, w02, w10, w11, w12, w20, w21, w22
    cdef double* o
    cdef const double* g
    cdef const double* g1
    cdef const double* g2
    with nogil:
        for ci in range(cin):
            for co in range(cout):
                for a in range(kt):
                    o = &gx[ci, a * plane]
                    if kh == 3 and kw == 3:
                        w00 = w[co, ci, a, 0, 0]; w01 = w[co, ci, a, 0, 1]; w02 = w[co, ci, a, 0, 2]
                        w10 = w[co, ci, a, 1, 0]; w11 = w[co, ci, a, 1, 1]; w12 = w[co, ci, a, 1, 2]
                        w20 = w[co, ci, a, 2, 0]; w21 = w[co, ci, a, 2, 1]; w22 = w[co, ci, a, 2, 2]
                        # g[q + M - (b*wp + c)] for each tap
                        g = &gext[co, M]
                        g1 = g - wp
                        g2 = g - 2 * wp
                        for q in range(L + M):
                            o[q] += (w00 * g[q] + w01 * g[q - 1] + w02 * g[q - 2]
                                     + w10 * g1[q] + w11 * g1[q - 1] + w12 * g1[q - 2]
                                     + w20 * g2[q] + w21 * g2[q - 1] + w22 * g2[q - 2])
                    else:
                        for b in range(kh):
                            for c in range(kw):
                                wv = w[co, ci, a, b, c]
                                o = &gx[ci, a * plane + b * wp + c]
                                g = &gext[co, M]
                                for p in range(L):
                                    o[p] += wv * g[p]
    return gx_arr


def conv3d_backward_weight(const double[:, ::1] gwide, const double[:, ::1] xflat, tuple kshape,
                           tuple padded_shape):
    cdef Py_ssize_t cout = gwide.shape[0], cin = xflat.shape[0]
    cdef Py_ssize_t kt = kshape[0], kh = kshape[1], kw = kshape[2]
    cdef Py_ssize_t hp = padded_shape[1], wp = padded_shape[2]
    cdef Py_ssize_t plane = hp * wp
    cdef Py_ssize_t L = gwide.shape[1]
    gw_arr = np.zeros((cout, cin, kt, kh, kw), dtype=np.float64)
    cdef double[:, :, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t co, ci, a, b, c, p
    cdef double acc, a00, a01, a02, a10, a11, a12, a20, a21, a22, gp
    cdef const double* g
    cdef const double* x
    cdef const double* x1
    cdef const double* x2
    with nogil:
        for co in range(cout):
            g = &gwide[co, 0]
            for ci in range(cin):
                for a in range(kt):
                    if kh == 3 and kw == 3:
                        x = &xflat[ci, a * plane]
                        x1 = x + wp
                        x2 = x + 2 * wp
                        a00 = 0.0; a01 = 0.0; a02 = 0.0
                        a10 = 0.0; a11 = 0.0; a12 = 0.0
                        a20 = 0.0; a21 = 0.0; a22 = 0.0
                        for p in range(L):
                            gp = g[p]
                            a00 = a00 + gp * x[p]; a01 = a01 + gp * x[p + 1]; a02 = a02 + gp * x[p + 2]
                            a10 = a10 + gp * x1[p]; a11 = a11 + gp * x1[p + 1]; a12 = a12 + gp * x1[p + 2]
                            a20 = a20 + gp * x2[p]; a21 = a21 + gp * x2[p + 1]; a22 = a22 + gp * x2[p + 2]
                        gw[co, ci, a, 0, 0] = a00; gw[co, ci, a, 0, 1] = a01; gw[co, ci, a, 0, 2] = a02
                        gw[co, ci, a, 1, 0] = a10; gw[co, ci, a, 1, 1] = a11; gw[co, ci, a, 1, 2] = a12
                        gw[co, ci, a, 2, 0] = a20; gw[co, ci, a, 2, 1] = a21; gw[co, ci, a, 2, 2] = a22
                    else:
                        for b in range(kh):
                            for c in range(kw):
                                x = &xflat[ci, a * plane + b * wp + c]
                                acc = 0.0
                                for p in range(L):
                                    acc = acc + g[p] * x[p]
                                gw[co, ci, a, b, c] = acc
    return gw_arr


def softplus(const double[::1] v):
    """``(softplus(v), sigmoid(v))``.

    exp and log1p go through numpy's vectorized loops (several times faster
    than scalar libm here, and identical to the fallback). The sigmoid
    overwrites the exp buffer so only two arrays are allocated.
    """
    cdef Py_ssize_t n = v.shape[0], i
    e_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] e = e_arr
    with nogil:
        for i in range(n):
            e[i] = -fabs(v[i])
    np.exp(e_arr, out=e_arr)
    out_arr = np.log1p(e_arr)
    cdef double[::1] out = out_arr
    cdef double x, ei, inv
    with nogil:
        for i in range(n):
            x = v[i]
            ei = e[i]
            inv = 1.0 / (1.0 + ei)
            out[i] = (x if x > 0.0 else 0.0) + out[i]
            e[i] = inv if x >= 0.0 else ei * inv
    return out_arr, e_arr


def block_cols(const double[:, :, :, ::1] x, tuple k):
    """``(C, T, H, W)`` -> ``(C*kt*kh*kw, N)`` for non-overlapping ``k`` blocks."""
    cdef Py_ssize_t c = x.shape[0], ka = k[0], kb = k[1], kd = k[2]
    cdef Py_ssize_t gt = x.shape[1] // ka, gh = x.shape[2] // kb, gw = x.shape[3] // kd
    out_arr = np.empty((c, ka, kb, kd, gt, gh, gw), dtype=np.float64)
    cdef double[:, :, :, :, :, :, ::1] o = out_arr
    cdef Py_ssize_t ch, t, ia, r, ib, cc, id_
    with nogil:
        for ch in range(c):
            for t in range(gt):
                for ia in range(ka):
                    for r in range(gh):
                        for ib in range(kb):
                            for cc in range(gw):
                                for id_ in range(kd):
                                    o[ch, ia, ib, id_, t, r, cc] = x[ch, t * ka + ia, r * kb + ib, cc * kd + id_]
    return out_arr.reshape(c * ka * kb * kd, gt * gh * gw)


def block_uncols(const double[:, ::1] cols, Py_ssize_t c, tuple k, tuple grid):
    """Inverse of :func:`block_cols`."""
    cdef Py_ssize_t ka = k[0], kb = k[1], kd = k[2]
    cdef Py_ssize_t gt = grid[0], gh = grid[1], gw = grid[2]
    out_arr = np.empty((c, gt * ka, gh * kb, gw * kd), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out_arr
    cdef Py_ssize_t ch, t, ia, r, ib, cc, id_, row, n = gt * gh * gw
    with nogil:
        for ch in range(c):
            for t in range(gt):
                for ia in range(ka):
                    for r in range(gh):
                        for ib in range(kb):
                            for cc in range(gw):
                                for id_ in range(kd):
                                    row = ((ch * ka + ia) * kb + ib) * kd + id_
                                    o[ch, t * ka + ia, r * kb + ib, cc * kd + id_] = cols[row, (t * gh + r) * gw + cc]
    return out_arr
