"""A small reverse-mode autodiff engine over dense float64 arrays.

Only the operations the reconstruction network and the training losses need
are provided. Each op records its parents and a closure that maps the output
gradient to parent gradients; :meth:`Tensor.backward` walks the tape in
reverse topological order.
"""

from __future__ import annotations

import numpy as np

from . import operators
from . import _fallback
from ._backend import kernels


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if not self.requires_grad:
            raise TapeError("backward() called on a value that is not on the gradient tape")
        if grad is None:
            if self.value.size != 1:
                raise TapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.value)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if parent.requires_grad and pg is not None:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ("trainable",)

    def __init__(self, value, name, trainable=True):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self.trainable = trainable


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _node(value, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    q = a.value / b.value
    return _node(q, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * q / b.value, b.shape)))


def log(x):
    x = as_tensor(x)
    return _node(np.log(x.value), (x,), lambda g: (g / x.value,))


def clamp_min(x, floor: float):
    """``max(x, floor)``; gradient passes only where ``x > floor``."""
    x = as_tensor(x)
    keep = x.value > floor
    return _node(np.where(keep, x.value, floor), (x,), lambda g: (g * keep,))


def log_floor(x, eps: float):
    return log(clamp_min(x, eps))


def softplus(x):
    """``log(1 + e^x)`` in the overflow-safe form ``max(x, 0) + log1p(e^-|x|)``."""
    x = as_tensor(x)
    flat = np.ascontiguousarray(x.value).reshape(-1)
    out, sig = kernels.softplus(flat)
    out, sig = out.reshape(x.shape), sig.reshape(x.shape)
    return _node(out, (x,), lambda g: (g * sig,))


def softplus_inverse(x, floor: float):
    """``log(e^v - 1)`` of ``v = max(x, floor)``, so ``softplus(softplus_inverse(x)) == x`` above the floor."""
    x = as_tensor(x)
    keep = x.value > floor
    v = np.where(keep, x.value, floor)
    em = -np.expm1(-v)
    return _node(v + np.log(em), (x,), lambda g: (g * keep / em,))


def total(x):
    x = as_tensor(x)
    return _node(np.sum(x.value, dtype=np.float64), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(xs):
    """Mean of a list of scalar tensors."""
    acc = xs[0]
    for x in xs[1:]:
        acc = acc + x
    return acc * (1.0 / len(xs))


def sum_axis(x, axis, keepdims=False):
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), back)


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def _triple(v):
    return (v, v, v) if isinstance(v, int) else tuple(v)


def _block_cols(x, k):
    """``(C, T, H, W)`` -> ``(C*kt*kh*kw, N)`` for non-overlapping ``k`` blocks."""
    c, t, h, w = x.shape
    a, b, d = k
    return kernels.block_cols(np.ascontiguousarray(x), tuple(k)), (t // a, h // b, w // d)


def _block_uncols(cols, c, k, grid):
    return kernels.block_uncols(np.ascontiguousarray(cols), c, tuple(k), tuple(grid))


def _grid_view(wide, padded, out_sp):
    """Valid outputs of a wide (flattened padded-grid) array as a strided 4-D view."""
    it = wide.itemsize
    plane = padded[1] * padded[2]
    return np.lib.stride_tricks.as_strided(
        wide, shape=(wide.shape[0],) + out_sp,
        strides=(wide.strides[0], plane * it, padded[2] * it, it), writeable=wide.flags.writeable)


def _conv_wide(x, wv, pad):
    """Stride-1 path: correlation on the flattened padded grid."""
    widths = ((0, 0),) + tuple((p, p) for p in pad)
    xpad = np.pad(x.value, widths)
    padded = tuple(xpad.shape[1:])
    xflat = xpad.reshape(xpad.shape[0], -1)
    k = wv.shape[2:]
    out_sp = tuple(n - kk + 1 for n, kk in zip(padded, k))
    if min(out_sp) < 1:
        raise ValueError(f"kernel {k} larger than padded input {padded}")
    cout = wv.shape[0]
    wide = kernels.conv3d_forward(xflat, wv, padded)
    out = np.ascontiguousarray(_grid_view(wide, padded, out_sp))

    def back_x_w(g, need_x, need_w):
        gwide = np.zeros((cout, wide.shape[1]))
        _grid_view(gwide, padded, out_sp)[...] = g
        gx = gw = None
        if need_x:
            gxp = kernels.conv3d_backward_input(gwide, wv, padded).reshape((-1,) + padded)
            gx = gxp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(pad, x.shape[1:]))]
        if need_w:
            # a reduction over L: BLAS GEMM beats the direct compiled loop here
            gw = _fallback.conv3d_backward_weight(gwide, xflat, tuple(k), padded)
        return gx, gw

    return out, back_x_w


def _conv_block(x, wv):
    """kernel == stride, no padding: one GEMM on block columns."""
    k = wv.shape[2:]
    if any(n % kk for n, kk in zip(x.shape[1:], k)):
        raise ValueError(f"input {x.shape[1:]} not divisible by kernel {k}")
    cols, grid = _block_cols(x.value, k)
    w2 = wv.reshape(wv.shape[0], -1)
    out = (w2 @ cols).reshape((wv.shape[0],) + grid)

    def back_x_w(g, need_x, need_w):
        g2 = g.reshape(g.shape[0], -1)
        gx = _block_uncols(w2.T @ g2, x.shape[0], k, grid) if need_x else None
        gw = (g2 @ cols.T).reshape(wv.shape) if need_w else None
        return gx, gw

    return out, back_x_w


def _conv_strided(x, wv, stride, pad):
    widths = ((0, 0),) + tuple((p, p) for p in pad)
    xpad = np.ascontiguousarray(np.pad(x.value, widths))
    out = _fallback.strided_conv3d_forward(xpad, wv, *stride)

    def back_x_w(g, need_x, need_w):
        gx = gw = None
        if need_x:
            gxp = _fallback.strided_conv3d_backward_input(g, wv, *stride, tuple(xpad.shape[1:]))
            gx = gxp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(pad, x.shape[1:]))]
        if need_w:
            gw = _fallback.strided_conv3d_backward_weight(g, xpad, tuple(wv.shape[2:]), *stride)
        return gx, gw

    return out, back_x_w


def _with_bias(out, back_x_w, x, w, b):
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.value[:, None, None, None]
        parents = (x, w, b)

    def back(g):
        g = np.ascontiguousarray(g)
        gx, gw = back_x_w(g, x.requires_grad, w.requires_grad)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    return _node(out, parents, back)


def conv3d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of a ``(Cin, T, H, W)`` tensor with ``(Cout, Cin, kt, kh, kw)`` weights."""
    x, w = as_tensor(x), as_tensor(w)
    stride, pad = _triple(stride), _triple(pad)
    if x.value.ndim != 4 or w.value.ndim != 5 or x.shape[0] != w.shape[1]:
        raise ValueError(f"conv3d shape mismatch: input {x.shape}, weight {w.shape}")
    wv = np.ascontiguousarray(w.value)
    if stride == (1, 1, 1):
        out, back_x_w = _conv_wide(x, wv, pad)
    elif stride == tuple(w.shape[2:]) and pad == (0, 0, 0):
        out, back_x_w = _conv_block(x, wv)
    else:
        out, back_x_w = _conv_strided(x, wv, stride, pad)
    return _with_bias(out, back_x_w, x, w, b)


def conv_transpose3d(x, w, b=None, stride=2):
    """Adjoint of :func:`conv3d` (no padding) for weights ``(Cin, Cout, kt, kh, kw)``."""
    x, w = as_tensor(x), as_tensor(w)
    stride = _triple(stride)
    if x.value.ndim != 4 or w.value.ndim != 5 or x.shape[0] != w.shape[0]:
        raise ValueError(f"conv_transpose3d shape mismatch: input {x.shape}, weight {w.shape}")
    k = tuple(w.shape[2:])
    wv = np.ascontiguousarray(w.value)
    xv = np.ascontiguousarray(x.value)
    cout = w.shape[1]
    if stride == k:
        w2 = wv.reshape(wv.shape[0], -1)
        x2 = xv.reshape(xv.shape[0], -1)
        grid = xv.shape[1:]
        out = _block_uncols(w2.T @ x2, cout, k, grid)

        def back_x_w(g, need_x, need_w):
            gcols, _ = _block_cols(g, k)
            gx = (w2 @ gcols).reshape(xv.shape) if need_x else None
            gw = (x2 @ gcols.T).reshape(wv.shape) if need_w else None
            return gx, gw
    else:
        out_shape = tuple((n - 1) * s + kk for n, s, kk in zip(xv.shape[1:], stride, k))
        out = _fallback.strided_conv3d_backward_input(xv, wv, *stride, out_shape)

        def back_x_w(g, need_x, need_w):
            gx = _fallback.strided_conv3d_forward(g, wv, *stride) if need_x else None
            gw = _fallback.strided_conv3d_backward_weight(xv, g, k, *stride) if need_w else None
            return gx, gw

    return _with_bias(out, back_x_w, x, w, b)


def downsample(x, scale):
    """Block-mean pooling over the trailing three axes."""
    x = as_tensor(x)
    s = operators.ScaleFactor.of(scale)
    out = operators.downsample(x.value, s)
    return _node(out, (x,), lambda g: (operators.upsample_nearest(g, s) / s.total,))


def transform(x, g_spec):
    """Group action of :class:`~spisr.operators.TransformSpec` (a permutation)."""
    x = as_tensor(x)
    t_bins = x.shape[-3]
    inv = g_spec.inverse(t_bins)

    def back(g):
        # inverse of shift-then-rotate is rotate-back then shift-back
        g = np.rot90(g, inv.quarter_turns, axes=(g.ndim - 2, g.ndim - 1))
        return (np.ascontiguousarray(np.roll(g, inv.shift_bins, axis=g.ndim - 3)),)

    return _node(operators.apply_transform(x.value, g_spec), (x,), back)


def _interp_weights(n, factor):
    pos = np.clip((np.arange(n * factor) + 0.5) / factor - 0.5, 0.0, n - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, pos - lo


def upsample_trilinear(x, scale):
    x = as_tensor(x)
    s = operators.ScaleFactor.of(scale)
    out = operators.upsample_trilinear(x.value, s)

    def back(g):
        nd = g.ndim
        for k in reversed(range(3)):
            f = s[k]
            if f == 1:
                continue
            axis = nd - 3 + k
            n = g.shape[axis] // f
            lo, hi, frac = _interp_weights(n, f)
            shape = [1] * nd
            shape[axis] = -1
            frac = frac.reshape(shape)
            acc_shape = list(g.shape)
            acc_shape[axis] = n
            acc = np.zeros(acc_shape)
            moved = np.moveaxis(acc, axis, 0)
            np.add.at(moved, lo, np.moveaxis(g * (1.0 - frac), axis, 0))
            np.add.at(moved, hi, np.moveaxis(g * frac, axis, 0))
            g = acc
        return (g,)

    return _node(out, (x,), back)


def numerical_gradient(fn, arrays, eps=1e-5, indices=None):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array.

    ``indices`` optionally restricts the probe to a list of flat indices per array.
    """
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        probe = range(flat.size) if indices is None else indices[k]
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*arrays)
            flat[i] = orig - eps
            fm = fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, indices=None) -> float:
    """Max elementwise relative error, denominators floored at 1% of the largest |numeric|.

    The floor keeps entries whose true gradient is ~0 from dominating through
    finite-difference round-off.
    """
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    if indices is not None:
        a, n = a[indices], n[indices]
    scale = np.max(np.abs(n)) if n.size else 0.0
    if scale == 0.0:
        return float(np.max(np.abs(a))) if a.size else 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-2 * scale)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(fn, arrays, eps=1e-5, indices=None) -> float:
    """Compare tape gradients of ``fn`` (Tensor-valued) against finite differences.

    Returns the max relative error over all inputs.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.value) for t in tensors]
    work = [a.copy() for a in arrays]
    numeric = numerical_gradient(lambda *xs: fn(*(Tensor(x) for x in xs)).item(), work, eps, indices)
    return max(relative_error(a, n, None if indices is None else indices[k])
               for k, (a, n) in enumerate(zip(analytic, numeric)))
