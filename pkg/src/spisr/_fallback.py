"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Shared signatures match the compiled module; the Poisson paths draw
the same counter-indexed uniforms, so both backends produce the same samples
up to last-ulp differences between libm and numpy transcendental functions.
The ``strided_*`` convolutions (arbitrary stride) exist only here.
"""

import math

import numpy as np
from scipy.special import gammaln

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
STREAM_C = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
DRAW_BITS = np.uint64(20)
INVERSION_CAP = 200


def mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_uniform(key, idx, draw):
    counter = (np.asarray(idx, dtype=np.uint64) << DRAW_BITS) | np.asarray(draw, dtype=np.uint64)
    z = mix64(mix64(counter * GOLDEN + STREAM_C) ^ np.uint64(key))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def uniforms(key, n, draw=0):
    return stream_uniform(key, np.arange(n, dtype=np.uint64), np.full(n, draw, dtype=np.uint64))


def _poisson_inversion(lam, u):
    k = np.zeros(lam.shape, dtype=np.int64)
    p = np.exp(-lam)
    cdf = p.copy()
    active = u > cdf
    while active.any():
        k[active] += 1
        p[active] *= lam[active] / k[active]
        cdf[active] += p[active]
        active &= (u > cdf) & (k < INVERSION_CAP)
    return k


def _poisson_ptrs(lam, key, idx):
    slam = np.sqrt(lam)
    loglam = np.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    out = np.zeros(lam.shape, dtype=np.int64)
    pending = np.arange(lam.size)
    attempt = 0
    while pending.size:
        sel = idx[pending]
        U = stream_uniform(key, sel, np.full(sel.size, 2 * attempt, dtype=np.uint64)) - 0.5
        V = stream_uniform(key, sel, np.full(sel.size, 2 * attempt + 1, dtype=np.uint64))
        attempt += 1
        us = 0.5 - np.abs(U)
        ok_us = us > 0.0
        safe_us = np.where(ok_us, us, 1.0)
        a_, b_, lam_ = a[pending], b[pending], lam[pending]
        k = np.floor((2.0 * a_ / safe_us + b_) * U + lam_ + 0.43).astype(np.int64)
        fast = ok_us & (us >= 0.07) & (V <= vr[pending])
        reject = ~ok_us | (k < 0) | ((us < 0.013) & (V > us))
        with np.errstate(divide="ignore"):
            lhs = np.log(V) + np.log(invalpha[pending]) - np.log(a_ / (safe_us * safe_us) + b_)
        rhs = -lam_ + k * loglam[pending] - gammaln(k + 1.0)
        accept = fast | (~reject & (lhs <= rhs))
        out[pending[accept]] = k[accept]
        pending = pending[~accept]
    return out


def poisson(lam, key, threshold):
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    n = lam.shape[0]
    out = np.zeros(n, dtype=np.float64)
    idx = np.arange(n, dtype=np.uint64)
    small = (lam > 0.0) & (lam < threshold)
    if small.any():
        u = stream_uniform(key, idx[small], np.zeros(int(small.sum()), dtype=np.uint64))
        out[small] = _poisson_inversion(lam[small], u)
    large = lam >= threshold
    if large.any():
        out[large] = _poisson_ptrs(lam[large], key, idx[large])
    return out


def softplus(v):
    e = np.exp(-np.abs(v))
    inv = 1.0 / (1.0 + e)
    return np.maximum(v, 0.0) + np.log1p(e), np.where(v >= 0.0, inv, e * inv)


def _taps(kshape, out_shape, stride):
    for a in range(kshape[0]):
        for b in range(kshape[1]):
            for c in range(kshape[2]):
                yield (a, b, c), (
                    slice(a, a + stride[0] * (out_shape[0] - 1) + 1, stride[0]),
                    slice(b, b + stride[1] * (out_shape[1] - 1) + 1, stride[1]),
                    slice(c, c + stride[2] * (out_shape[2] - 1) + 1, stride[2]),
                )


def _wide_offsets(kshape, padded_shape):
    plane = padded_shape[1] * padded_shape[2]
    for a in range(kshape[0]):
        for b in range(kshape[1]):
            for c in range(kshape[2]):
                yield (a, b, c), a * plane + b * padded_shape[2] + c


def _wide_len(P, kshape, padded_shape):
    plane = padded_shape[1] * padded_shape[2]
    return P - ((kshape[0] - 1) * plane + (kshape[1] - 1) * padded_shape[2] + (kshape[2] - 1))


def conv3d_forward(xflat, w, padded_shape):
    """Stride-1 correlation on the flattened padded grid ("wide" output of length L)."""
    kshape = w.shape[2:]
    L = _wide_len(xflat.shape[1], kshape, padded_shape)
    out = np.zeros((w.shape[0], L))
    for (a, b, c), off in _wide_offsets(kshape, padded_shape):
        out += w[:, :, a, b, c] @ xflat[:, off:off + L]
    return out


def conv3d_backward_input(gwide, w, padded_shape):
    kshape = w.shape[2:]
    L = gwide.shape[1]
    gx = np.zeros((w.shape[1], math.prod(padded_shape)))
    for (a, b, c), off in _wide_offsets(kshape, padded_shape):
        gx[:, off:off + L] += w[:, :, a, b, c].T @ gwide
    return gx


def conv3d_backward_weight(gwide, xflat, kshape, padded_shape):
    L = gwide.shape[1]
    gw = np.zeros((gwide.shape[0], xflat.shape[0]) + tuple(kshape))
    for (a, b, c), off in _wide_offsets(kshape, padded_shape):
        gw[:, :, a, b, c] = gwide @ xflat[:, off:off + L].T
    return gw


def strided_conv3d_forward(xpad, w, st, sh, sw):
    cout, cin = w.shape[:2]
    kshape = w.shape[2:]
    out_shape = tuple((xpad.shape[i + 1] - kshape[i]) // s + 1 for i, s in enumerate((st, sh, sw)))
    n = math.prod(out_shape)
    out = np.zeros((cout, n))
    for (a, b, c), sl in _taps(kshape, out_shape, (st, sh, sw)):
        out += w[:, :, a, b, c] @ xpad[(slice(None),) + sl].reshape(cin, n)
    return out.reshape((cout,) + out_shape)


def strided_conv3d_backward_input(gout, w, st, sh, sw, padded_shape):
    cout, cin = w.shape[:2]
    kshape = w.shape[2:]
    out_shape = gout.shape[1:]
    g2 = gout.reshape(cout, -1)
    gx = np.zeros((cin,) + tuple(padded_shape))
    for (a, b, c), sl in _taps(kshape, out_shape, (st, sh, sw)):
        gx[(slice(None),) + sl] += (w[:, :, a, b, c].T @ g2).reshape((cin,) + out_shape)
    return gx


def strided_conv3d_backward_weight(gout, xpad, kshape, st, sh, sw):
    cout = gout.shape[0]
    cin = xpad.shape[0]
    out_shape = gout.shape[1:]
    g2 = gout.reshape(cout, -1)
    gw = np.zeros((cout, cin) + tuple(kshape))
    for (a, b, c), sl in _taps(kshape, out_shape, (st, sh, sw)):
        gw[:, :, a, b, c] = g2 @ xpad[(slice(None),) + sl].reshape(cin, -1).T
    return gw


def block_cols(x, k):
    """``(C, T, H, W)`` -> ``(C*kt*kh*kw, N)`` for non-overlapping ``k`` blocks."""
    c, t, h, w = x.shape
    a, b, d = k
    v = x.reshape(c, t // a, a, h // b, b, w // d, d).transpose(0, 2, 4, 6, 1, 3, 5)
    return np.ascontiguousarray(v).reshape(c * a * b * d, -1)


def block_uncols(cols, c, k, grid):
    """Inverse of :func:`block_cols`."""
    a, b, d = k
    v = cols.reshape(c, a, b, d, *grid).transpose(0, 4, 1, 5, 2, 6, 3)
    return np.ascontiguousarray(v).reshape(c, grid[0] * a, grid[1] * b, grid[2] * d)
