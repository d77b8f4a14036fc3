"""Single-photon forward model and procedural scene generation.

Depth is authored directly in (1-based) HR time-bin units; the round-trip
time conversion ``2D / (c * dt)`` is metadata only, see :func:`meters_to_bins`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cube import CubeDims, CubeError, DepthImage, PhotonCountingCube, Rng, poisson_array
from .operators import ScaleFactor, downsample

SPEED_OF_LIGHT = 299_792_458.0
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def meters_to_bins(depth_m, bin_seconds):
    return 2.0 * np.asarray(depth_m) / (SPEED_OF_LIGHT * bin_seconds)


def bins_to_meters(depth_bins, bin_seconds):
    return np.asarray(depth_bins) * SPEED_OF_LIGHT * bin_seconds / 2.0


@dataclass(frozen=True, eq=False)
class PulseShape:
    fwhm_bins: float
    kernel: np.ndarray

    @property
    def sigma(self) -> float:
        return self.fwhm_bins * FWHM_TO_SIGMA

    @property
    def center(self) -> int:
        return len(self.kernel) // 2


def default_support(fwhm_bins: float) -> int:
    n = max(int(math.ceil(4.0 * fwhm_bins)), 1)
    return n if n % 2 else n + 1


def make_pulse(fwhm_bins: float, support_bins: int | None = None) -> PulseShape:
    """Discrete Gaussian impulse response with the given FWHM, normalized to sum 1.

    ``fwhm_bins == 0`` gives the delta pulse.
    """
    if fwhm_bins < 0:
        raise ValueError("fwhm must be non-negative")
    if support_bins is None:
        support_bins = default_support(fwhm_bins)
    if support_bins < 1 or support_bins % 2 == 0:
        raise ValueError(f"support must be a positive odd integer, got {support_bins}")
    if support_bins < 3 * fwhm_bins:
        raise ValueError(f"support {support_bins} too small for fwhm {fwhm_bins} (need >= 3*fwhm)")
    c = support_bins // 2
    if fwhm_bins == 0:
        kernel = np.zeros(support_bins)
        kernel[c] = 1.0
    else:
        sigma = fwhm_bins * FWHM_TO_SIGMA
        x = np.arange(support_bins) - c
        kernel = np.exp(-0.5 * (x / sigma) ** 2)
        kernel /= kernel.sum()
    kernel.flags.writeable = False
    return PulseShape(float(fwhm_bins), kernel)


def downsample_pulse(pulse: PulseShape, t_scale: int) -> PulseShape:
    """Pulse as seen on a grid ``t_scale`` times coarser (used for LR matched filtering)."""
    if t_scale == 1:
        return pulse
    return make_pulse(pulse.fwhm_bins / t_scale, default_support(pulse.fwhm_bins / t_scale))


@dataclass(frozen=True, eq=False)
class SceneParams:
    """Per-pixel scene description on the HR lateral grid.

    ``background`` is the per-time-bin background rate n[i, j]; total rates are
    scaled by ``illuminations`` (K).
    """

    depth: DepthImage
    albedo: np.ndarray
    background: np.ndarray
    illuminations: float = 1.0
    gamma: float = 0.005
    sbr: float | None = None

    def __post_init__(self):
        albedo = np.asarray(self.albedo, dtype=np.float64)
        background = np.asarray(self.background, dtype=np.float64)
        if albedo.shape != self.depth.data.shape or background.shape != self.depth.data.shape:
            raise CubeError("albedo/background shape must match depth")
        if np.any(albedo < 0) or np.any(albedo > 1):
            raise CubeError("albedo must lie in [0, 1]")
        if np.any(background < 0):
            raise CubeError("background must be non-negative")
        if self.illuminations <= 0:
            raise ValueError("illuminations must be positive")
        object.__setattr__(self, "albedo", albedo)
        object.__setattr__(self, "background", background)


def _signal_cube(depth: np.ndarray, pulse: PulseShape, t_bins: int) -> np.ndarray:
    """Unit-amplitude pulses centered at (fractional, 1-based) bin ``depth``."""
    d0 = np.floor(depth).astype(np.int64)
    frac = depth - d0
    rows, cols = depth.shape
    out = np.zeros((t_bins + 2 * len(pulse.kernel) + 2, rows, cols))
    pad = len(pulse.kernel) + 1
    ii, jj = np.indices(depth.shape)
    for o, k in enumerate(pulse.kernel):
        t0 = d0 - 1 + o - pulse.center + pad
        np.add.at(out, (t0, ii, jj), (1.0 - frac) * k)
        np.add.at(out, (t0 + 1, ii, jj), frac * k)
    return out[pad:pad + t_bins]


def signal_totals(scene: SceneParams, pulse: PulseShape, t_bins: int) -> tuple[float, float]:
    """(total expected signal, total expected background) over the whole cube."""
    sig = _signal_cube(scene.depth.data, pulse, t_bins)
    signal = scene.illuminations * float((scene.albedo * sig.sum(axis=0)).sum())
    background = scene.illuminations * float(scene.background.sum()) * t_bins
    return signal, background


def expected_rate_cube(scene: SceneParams, pulse: PulseShape, dims: CubeDims) -> PhotonCountingCube:
    depth = scene.depth.data
    if depth.shape != (dims.rows, dims.cols):
        raise CubeError(f"scene lateral size {depth.shape} does not match cube {dims}")
    bad = ~((depth >= 1) & (depth <= dims.t_bins))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise CubeError(f"depth {depth[i, j]!r} at pixel ({i}, {j}) outside bin range [1, {dims.t_bins}]")
    sig = _signal_cube(depth, pulse, dims.t_bins)
    rate = scene.illuminations * (scene.albedo[None] * sig + scene.background[None])
    return PhotonCountingCube(rate)


def calibrate_sbr(scene: SceneParams, target_sbr: float, pulse: PulseShape | None = None,
                  t_bins: int = 1) -> SceneParams:
    """Rescale the background so total signal / total background == ``target_sbr``.

    Without ``pulse`` the full pulse mass is counted as signal. A zero background
    map is replaced by a uniform one before rescaling.
    """
    if target_sbr <= 0:
        raise ValueError("target SBR must be positive")
    if pulse is None:
        signal = scene.illuminations * float(scene.albedo.sum())
    else:
        signal, _ = signal_totals(scene, pulse, t_bins)
    if signal <= 0:
        raise CubeError("scene has no signal energy; SBR undefined")
    pattern = scene.background if scene.background.sum() > 0 else np.ones_like(scene.background)
    want = signal / target_sbr
    have = scene.illuminations * float(pattern.sum()) * t_bins
    return replace(scene, background=pattern * (want / have), sbr=float(target_sbr))


def measure(rate_hr, scale, gamma: float, rng: Rng) -> PhotonCountingCube:
    """Noisy LR measurement ``gamma * Poisson(A_down(rate) / gamma)``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    lr = downsample(rate_hr, scale)
    lr = lr.data if isinstance(lr, PhotonCountingCube) else lr
    return PhotonCountingCube(gamma * poisson_array(lr / gamma, rng))


@dataclass(frozen=True, eq=False)
class SamplePair:
    lr: PhotonCountingCube
    hr_gt: PhotonCountingCube | None
    depth_gt: DepthImage | None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hr_gt is not None:
            hr, lr = self.hr_gt.dims.shape, self.lr.dims.shape
            if any(h % l for h, l in zip(hr, lr)):
                raise CubeError(f"LR {lr} is not an integer down-scaling of HR {hr}")


@dataclass(frozen=True)
class SceneStyle:
    """Knobs of the procedural scene generator."""

    max_objects: int = 3
    base_depth: tuple[float, float] = (0.35, 0.75)
    max_tilt: float = 0.15
    object_offset: tuple[float, float] = (0.08, 0.3)
    object_size: tuple[float, float] = (0.15, 0.45)
    albedo_range: tuple[float, float] = (0.3, 1.0)


def random_scene_geometry(rng: Rng, side: int, t_bins: int, margin: float,
                          style: SceneStyle = SceneStyle()) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-smooth depth (tilted planes with raised rectangles/ellipses) and albedo."""
    u = rng.uniform((64,))
    it = iter(u)
    y, x = (np.indices((side, side)) + 0.5) / side - 0.5
    lo, hi = style.base_depth
    base = (lo + (hi - lo) * next(it)) * t_bins
    gx, gy = (2 * next(it) - 1) * style.max_tilt * t_bins, (2 * next(it) - 1) * style.max_tilt * t_bins
    depth = base + gx * x + gy * y
    a_lo, a_hi = style.albedo_range
    albedo = np.full((side, side), a_lo + (a_hi - a_lo) * next(it))
    albedo = albedo + 0.15 * (2 * next(it) - 1) * x
    n_obj = 1 + min(int(next(it) * style.max_objects), style.max_objects - 1)
    for _ in range(n_obj):
        cx, cy = next(it) - 0.5, next(it) - 0.5
        s_lo, s_hi = style.object_size
        wx, wy = (s_lo + (s_hi - s_lo) * next(it)) / 2, (s_lo + (s_hi - s_lo) * next(it)) / 2
        if next(it) < 0.5:
            mask = (np.abs(x - cx) <= wx) & (np.abs(y - cy) <= wy)
        else:
            mask = ((x - cx) / wx) ** 2 + ((y - cy) / wy) ** 2 <= 1.0
        o_lo, o_hi = style.object_offset
        offset = (o_lo + (o_hi - o_lo) * next(it)) * t_bins
        tilt = (2 * next(it) - 1) * 0.5 * style.max_tilt * t_bins
        obj_depth = base - offset + tilt * (x - cx)
        depth = np.where(mask, obj_depth, depth)
        albedo = np.where(mask, a_lo + (a_hi - a_lo) * next(it), albedo)
    depth = np.clip(depth, 1.0 + margin, t_bins - margin)
    albedo = np.clip(albedo, a_lo, a_hi)
    return depth, albedo


def simulate_pair(depth: np.ndarray, albedo: np.ndarray, hr_dims: CubeDims, scale, sbr: float,
                  gamma: float, illuminations: float, pulse: PulseShape, rng: Rng,
                  background_pattern: np.ndarray | None = None) -> SamplePair:
    if background_pattern is None:
        background_pattern = np.ones_like(depth)
    scene = SceneParams(DepthImage(depth), albedo, background_pattern, illuminations, gamma)
    scene = calibrate_sbr(scene, sbr, pulse, hr_dims.t_bins)
    hr = expected_rate_cube(scene, pulse, hr_dims)
    lr = measure(hr, scale, gamma, rng)
    return SamplePair(lr, hr, scene.depth, {"sbr": sbr, "gamma": gamma})


def generate_scene_dataset(count: int, dims: CubeDims, scale, sbr: float, gamma: float, rng: Rng,
                           pulse: PulseShape | None = None, illuminations: float = 1.0,
                           style: SceneStyle = SceneStyle()) -> list[SamplePair]:
    """Procedural training/evaluation pairs; ``dims`` is the HR cube size.

    Sample ``i`` uses the sub-stream ``rng.spawn(i)`` so samples are independent
    of generation order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    s = ScaleFactor.of(scale)
    if pulse is None:
        pulse = make_pulse(3.0)
    margin = float(pulse.center)
    base = rng.spawn(rng.next_key())
    pairs = []
    for i in range(count):
        sub = base.spawn(i)
        depth, albedo = random_scene_geometry(sub, dims.rows, dims.t_bins, margin, style)
        pairs.append(simulate_pair(depth, albedo, dims, s, sbr, gamma, illuminations, pulse, sub))
    return pairs
