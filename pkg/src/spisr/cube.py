"""Photon counting cubes, depth images and the seeded random stream.

Cubes are stored t-major (``data[t, row, col]``) as float64 so that each
pixel's timing histogram is contiguous and noiseless expected-rate cubes share
a type with sampled count cubes.
"""

from __future__ import annotations

import enum
import operator
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from ._fallback import mix64

# Rates at or above this use the PTRS rejection sampler, below it inversion.
POISSON_INVERSION_LIMIT = 30.0


class CubeError(ValueError):
    """Invalid cube dimensions or contents."""


@dataclass(frozen=True)
class CubeDims:
    t_bins: int
    rows: int
    cols: int

    def __post_init__(self):
        for name in ("t_bins", "rows", "cols"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise CubeError(f"{name} must be a positive integer, got {v!r}")
        if self.rows != self.cols:
            raise CubeError(f"lateral grid must be square, got {self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.t_bins, self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.t_bins * self.rows * self.cols

    def scaled(self, scale) -> "CubeDims":
        return CubeDims(self.t_bins * scale[0], self.rows * scale[1], self.cols * scale[2])

    def flat_index(self, t: int, i: int, j: int) -> int:
        return (t * self.rows + i) * self.cols + j

    def unflat_index(self, k: int) -> tuple[int, int, int]:
        t, rem = divmod(k, self.rows * self.cols)
        i, j = divmod(rem, self.cols)
        return t, i, j

    @classmethod
    def of(cls, shape) -> "CubeDims":
        return cls(*(int(s) for s in shape))


class PhotonCountingCube:
    """Immutable non-negative T x S x S volume of per-pixel timing histograms."""

    __slots__ = ("dims", "data")

    def __init__(self, data, *, check: bool = True):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3:
            raise CubeError(f"cube data must be 3-D, got shape {arr.shape}")
        dims = CubeDims.of(arr.shape)
        if check and not np.all(arr >= 0):
            bad = np.argwhere(~(arr >= 0))[0]
            raise CubeError(f"cube values must be non-negative (first offender at {tuple(bad)})")
        arr.flags.writeable = False
        self.dims = dims
        self.data = arr

    @classmethod
    def zeros(cls, dims: CubeDims) -> "PhotonCountingCube":
        return cls(np.zeros(dims.shape))

    @classmethod
    def full(cls, dims: CubeDims, value: float) -> "PhotonCountingCube":
        return cls(np.full(dims.shape, float(value)))

    @property
    def shape(self):
        return self.data.shape

    def total(self) -> float:
        return float(self.data.sum(dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, PhotonCountingCube):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    __hash__ = None

    def __repr__(self):
        return f"PhotonCountingCube(dims={self.dims}, total={self.total():.6g})"


class DepthUnit(enum.Enum):
    BINS = "bins"
    METERS = "meters"


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Per-pixel depth. NaN marks invalid pixels (e.g. empty histograms)."""

    data: np.ndarray
    unit: DepthUnit = DepthUnit.BINS

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 2:
            raise CubeError(f"depth image must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.data)

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return self.unit == other.unit and np.array_equal(self.data, other.data, equal_nan=True)

    __hash__ = None


_MASK64 = 0xFFFFFFFFFFFFFFFF


class Rng:
    """Counter-based SplitMix64 stream.

    Every draw consumes one 64-bit key; element ``i`` of a draw is a hash of
    (key, i, attempt), so results do not depend on platform, thread count or
    the order in which elements are produced.
    """

    algorithm = "splitmix64-counter"

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        self._base = int(mix64(np.array([self.seed], dtype=np.uint64))[0])

    def next_key(self) -> int:
        self.counter += 1
        z = (self._base + self.counter * 0x9E3779B97F4A7C15) & _MASK64
        return int(mix64(np.array([z], dtype=np.uint64))[0])

    def spawn(self, *lanes: int) -> "Rng":
        """Independent sub-stream for ``lanes`` (e.g. epoch, step, sample)."""
        z = self._base
        for lane in lanes:
            z = int(mix64(np.array([z ^ int(mix64(np.array([int(lane) + 1], dtype=np.uint64))[0])],
                                   dtype=np.uint64))[0])
        return Rng(z)

    def uniform(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return kernels.uniforms(self.next_key(), n).reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        return np.minimum(np.floor(self.uniform(shape) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter, "algorithm": self.algorithm}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"


_OPS = {"add": operator.add, "sub": operator.sub, "mul": operator.mul, "div": operator.truediv}


def elementwise(a: PhotonCountingCube, b: PhotonCountingCube, op: str) -> PhotonCountingCube:
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}")
    if a.dims != b.dims:
        raise CubeError(f"dimension mismatch: {a.dims} vs {b.dims}")
    if op == "div" and not np.all(b.data > 0):
        raise ZeroDivisionError("division by a cube with non-positive entries")
    return PhotonCountingCube(_OPS[op](a.data, b.data))


def poisson_array(rate: np.ndarray, rng: Rng) -> np.ndarray:
    """Poisson draws for an arbitrary-shape non-negative rate array."""
    rate = np.asarray(rate, dtype=np.float64)
    if not np.all(np.isfinite(rate)) or np.any(rate < 0):
        raise CubeError("Poisson rates must be finite and non-negative")
    flat = np.ascontiguousarray(rate.ravel())
    return kernels.poisson(flat, rng.next_key(), POISSON_INVERSION_LIMIT).reshape(rate.shape)


def sample_poisson(rate: PhotonCountingCube, rng: Rng) -> PhotonCountingCube:
    return PhotonCountingCube(poisson_array(rate.data, rng))


def sample_bernoulli_pm1(dims: CubeDims, rng: Rng) -> np.ndarray:
    """Fair +-1 signs with the cube's shape.

    Returned as a plain array rather than a cube since the entries are signed.
    """
    return np.where(rng.uniform(dims.shape) < 0.5, -1.0, 1.0)
