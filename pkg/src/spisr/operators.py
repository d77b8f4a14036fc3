"""Down-sampling, trilinear up-sampling and the quarter-turn / cyclic-shift group.

All functions accept raw arrays of shape ``(T, S, S)`` or ``(C, T, S, S)``
(the trailing three axes are the cube axes) as well as
:class:`~spisr.cube.PhotonCountingCube`, returning the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube import CubeError, PhotonCountingCube, Rng


@dataclass(frozen=True)
class ScaleFactor:
    t_scale: int = 2
    row_scale: int = 2
    col_scale: int = 2

    def __post_init__(self):
        for v in self:
            if int(v) != v or v < 1:
                raise ValueError(f"scale components must be positive integers, got {tuple(self)}")

    def __iter__(self):
        return iter((self.t_scale, self.row_scale, self.col_scale))

    def __getitem__(self, i):
        return tuple(self)[i]

    @property
    def total(self) -> int:
        return self.t_scale * self.row_scale * self.col_scale

    @classmethod
    def of(cls, value) -> "ScaleFactor":
        if isinstance(value, ScaleFactor):
            return value
        if isinstance(value, int):
            return cls(value, value, value)
        return cls(*value)


@dataclass(frozen=True)
class TransformSpec:
    """Lateral rotation by ``quarter_turns`` x 90 degrees, then cyclic t-shift."""

    quarter_turns: int = 0
    shift_bins: int = 0

    def compose(self, other: "TransformSpec", t_bins: int) -> "TransformSpec":
        return TransformSpec((self.quarter_turns + other.quarter_turns) % 4,
                             (self.shift_bins + other.shift_bins) % t_bins)

    def inverse(self, t_bins: int) -> "TransformSpec":
        return TransformSpec((4 - self.quarter_turns) % 4, (t_bins - self.shift_bins) % t_bins)


def _unwrap(x):
    if isinstance(x, PhotonCountingCube):
        return x.data, True
    return np.asarray(x, dtype=np.float64), False


def _wrap(arr, was_cube):
    return PhotonCountingCube(arr, check=False) if was_cube else arr


def downsample(hr, scale) -> np.ndarray | PhotonCountingCube:
    """Block-mean pooling over ``t_scale x row_scale x col_scale`` blocks."""
    arr, was_cube = _unwrap(hr)
    s = ScaleFactor.of(scale)
    lead = arr.shape[:-3]
    T, R, C = arr.shape[-3:]
    if T % s.t_scale or R % s.row_scale or C % s.col_scale:
        raise CubeError(f"cube {arr.shape[-3:]} not divisible by scale {tuple(s)}")
    blocks = arr.reshape(lead + (T // s.t_scale, s.t_scale, R // s.row_scale, s.row_scale,
                                 C // s.col_scale, s.col_scale))
    n = len(lead)
    if s.row_scale == s.col_scale == 2:
        # t first, then the two diagonals of each 2x2 block: a quarter-turn swaps
        # the diagonals, so every addition is commutative and the result is
        # bit-identical under the group
        p = blocks.sum(axis=n + 1)
        d0 = p[..., 0, :, 0] + p[..., 1, :, 1]
        d1 = p[..., 0, :, 1] + p[..., 1, :, 0]
        out = (d0 + d1) / s.total
    else:
        out = blocks.mean(axis=(n + 1, n + 3, n + 5))
    return _wrap(out, was_cube)


def _interp_axis(arr, axis, factor):
    n = arr.shape[axis]
    pos = (np.arange(n * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - frac) + np.take(arr, hi, axis=axis) * frac


def upsample_trilinear(lr, scale):
    """Trilinear interpolation at half-pixel-aligned positions, edges clamped."""
    arr, was_cube = _unwrap(lr)
    s = ScaleFactor.of(scale)
    out = arr
    for k, f in enumerate(s):
        if f > 1:
            out = _interp_axis(out, arr.ndim - 3 + k, f)
    return _wrap(np.ascontiguousarray(out), was_cube)


def upsample_nearest(lr, scale):
    arr, was_cube = _unwrap(lr)
    s = ScaleFactor.of(scale)
    out = arr
    for k, f in enumerate(s):
        out = np.repeat(out, f, axis=arr.ndim - 3 + k)
    return _wrap(np.ascontiguousarray(out), was_cube)


def apply_transform(x, g: TransformSpec):
    """Cyclic shift of the t axis by ``g.shift_bins``, then lateral rotation."""
    arr, was_cube = _unwrap(x)
    if arr.shape[-1] != arr.shape[-2]:
        raise CubeError(f"rotation needs a square lateral grid, got {arr.shape[-2:]}")
    nd = arr.ndim
    out = np.roll(arr, g.shift_bins, axis=nd - 3)
    out = np.rot90(out, g.quarter_turns, axes=(nd - 2, nd - 1))
    return _wrap(np.ascontiguousarray(out), was_cube)


def apply_transform_lr(x, g: TransformSpec, scale):
    """The same group element acting on the low-resolution grid.

    ``g.shift_bins`` is in HR bins and must be a multiple of the temporal scale.
    """
    s = ScaleFactor.of(scale)
    if g.shift_bins % s.t_scale:
        raise ValueError(f"shift {g.shift_bins} is not a multiple of t_scale {s.t_scale}")
    return apply_transform(x, TransformSpec(g.quarter_turns, g.shift_bins // s.t_scale))


def random_transform(rng: Rng, t_bins: int, t_scale: int = 1) -> TransformSpec:
    if t_bins < 1:
        raise ValueError("t_bins must be >= 1")
    q, s = rng.uniform((2,))
    n_shifts = max(t_bins // t_scale, 1)
    return TransformSpec(min(int(q * 4), 3), min(int(s * n_shifts), n_shifts - 1) * t_scale)
