"""Training objectives: supervised KL, exact and Monte Carlo PUKL, equivariance KL.

All differentiable losses take and return :class:`~spisr.autodiff.Tensor`.

``LossConfig.completion`` adds the terms that turn the literal log-only sums
into proper Poisson deviances; without them every self-supervised loss keeps
decreasing as the output grows. With ``completion=False`` the functions
evaluate the bare sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cube import CubeDims, CubeError, PhotonCountingCube, Rng, sample_bernoulli_pm1
from .operators import ScaleFactor


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    tau: float = 1e-2
    gamma: float = 0.005
    sigma: float | None = None
    eps_floor: float = 1e-12
    completion: bool = True
    grad_through_perturbed: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise LossError("alpha must be non-negative")
        if self.tau <= 0 or self.gamma <= 0 or self.eps_floor <= 0:
            raise LossError("tau, gamma and eps_floor must be positive")
        if self.sigma is not None and self.sigma <= 0:
            raise LossError("sigma must be positive")

    @property
    def corruption(self) -> float:
        """Poisson level of the equivariant branch; defaults to gamma."""
        return self.gamma if self.sigma is None else self.sigma


def _array(x):
    if isinstance(x, PhotonCountingCube):
        return x.data
    if isinstance(x, ad.Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def normalize_histograms(h) -> np.ndarray:
    """Per-pixel normalization along t so every histogram sums to 1."""
    arr = _array(h)
    sums = arr.sum(axis=0, keepdims=True)
    if np.any(sums <= 0):
        raise LossError("cannot normalize an empty histogram")
    return arr / sums


def kl_supervised(pred, gt_norm, eps_floor: float = 1e-12) -> ad.Tensor:
    """Sum over pixels of KL(gt || pred/sum_t pred); gt must be per-pixel normalized."""
    pred = ad.as_tensor(pred)
    gt = _array(gt_norm)
    if pred.shape != gt.shape:
        raise LossError(f"dims mismatch: pred {pred.shape} vs gt {gt.shape}")
    sums = gt.sum(axis=0)
    if np.max(np.abs(sums - 1.0)) > 1e-6:
        raise LossError("ground truth histograms must each sum to 1 (max deviation "
                        f"{np.max(np.abs(sums - 1.0)):.3g})")
    pn = pred / ad.sum_axis(pred, 0, keepdims=True)
    mask = gt > 0
    log_gt = np.where(mask, np.log(np.maximum(gt, eps_floor)), 0.0)
    const = float(np.sum(gt * log_gt))
    return ad.total(ad.mul(ad.log_floor(pn, eps_floor), -gt)) + const


def intensity_anchor(pred, gt_raw) -> ad.Tensor:
    """Scale term for supervised training: sum over pixels of r - log r - 1, r = N_pred / N_gt.

    Per-pixel totals carry no depth information, but the softmax used for depth
    extraction depends on the absolute scale of the prediction.
    """
    pred = ad.as_tensor(pred)
    n_gt = _array(gt_raw).sum(axis=0)
    r = ad.sum_axis(pred, 0) * (1.0 / n_gt)
    return ad.total(r - ad.log(r)) - float(r.value.size)


def pukl_exact(f, y, eps_floor: float = 1e-12) -> float:
    """-sum_i y[i] log f(y - e_i)[i] for integer counts ``y`` and a mapping ``f``.

    ``f`` maps an array shaped like ``y`` to a positive array of the same shape.
    Coordinates with ``y[i] == 0`` are skipped.
    """
    y = np.asarray(_array(y), dtype=np.float64)
    if np.any(y < 0):
        raise LossError("counts must be non-negative")
    if np.any(y != np.round(y)):
        raise LossError("counts must be integer-valued")
    flat = y.reshape(-1)
    acc = []
    for i in np.flatnonzero(flat):
        shifted = flat.copy()
        shifted[i] -= 1.0
        fi = np.asarray(f(shifted.reshape(y.shape))).reshape(-1)[i]
        acc.append(flat[i] * math.log(max(fi, eps_floor)))
    return -math.fsum(acc)


def pukl_exact_batch(f, ys, eps_floor: float = 1e-12) -> np.ndarray:
    """:func:`pukl_exact` for each row of ``ys`` (shape ``(N, ...)``) in one pass per coordinate.

    ``f`` must map a batch ``(N, ...)`` to a positive batch of the same shape,
    acting on each row independently.
    """
    ys = np.asarray(ys, dtype=np.float64)
    if np.any(ys < 0):
        raise LossError("counts must be non-negative")
    if np.any(ys != np.round(ys)):
        raise LossError("counts must be integer-valued")
    flat = ys.reshape(ys.shape[0], -1)
    out = np.zeros(flat.shape[0])
    for i in range(flat.shape[1]):
        rows = flat[:, i] > 0
        if not rows.any():
            continue
        shifted = flat[rows].copy()
        shifted[:, i] -= 1.0
        fi = np.asarray(f(shifted.reshape((-1,) + ys.shape[1:]))).reshape(shifted.shape[0], -1)[:, i]
        out[rows] -= flat[rows, i] * np.log(np.maximum(fi, eps_floor))
    return out


def pukl_mc(net, h_l, cfg: LossConfig, rng: Rng, scale=None, h1_hr: ad.Tensor | None = None,
            gamma: float | None = None) -> ad.Tensor:
    """Monte Carlo PUKL consistency loss.

    ``net`` maps an LR array/tensor to an HR tensor; ``scale`` defaults to
    ``net.scale``. ``h1_hr`` reuses an existing ``net(h_l)`` evaluation.
    ``gamma`` overrides ``cfg.gamma`` (0 gives the plain log-consistency term).
    """
    y = _array(h_l)
    if np.any(y < 0):
        raise LossError("measurement must be non-negative")
    scale = ScaleFactor.of(scale if scale is not None else net.scale)
    gamma = cfg.gamma if gamma is None else gamma
    if h1_hr is None:
        h1_hr = net(y)
    h1 = ad.downsample(h1_hr, scale)
    b = sample_bernoulli_pm1(CubeDims.of(y.shape), rng)
    perturbed = ad.downsample(net(y + cfg.tau * b), scale)
    if not cfg.grad_through_perturbed:
        perturbed = perturbed.detach()
    hm = h1 + (perturbed - h1) * ((gamma / cfg.tau) * b * y)
    loss = ad.total(ad.mul(ad.log_floor(hm, cfg.eps_floor), -y))
    if cfg.completion:
        loss = loss + ad.total(h1)
    return loss


def equivariance_loss(h2, h3, cfg: LossConfig) -> ad.Tensor:
    """sum h2 log(h2 / h3), both sides floored at ``eps_floor``; gradient flows into both."""
    h2, h3 = ad.as_tensor(h2), ad.as_tensor(h3)
    if h2.shape != h3.shape:
        raise LossError(f"dims mismatch: {h2.shape} vs {h3.shape}")
    ratio = ad.log_floor(h2, cfg.eps_floor) - ad.log_floor(h3, cfg.eps_floor)
    loss = ad.total(h2 * ratio)
    if cfg.completion:
        loss = loss + ad.total(h3 - h2)
    return loss


def total_loss(pukl, le, alpha: float):
    for v in (pukl, le):
        x = v.item() if isinstance(v, ad.Tensor) else float(v)
        if math.isnan(x):
            raise LossError("NaN loss term")
    return pukl + le * alpha


def check_finite(x, what="loss"):
    v = _array(x)
    if not np.all(np.isfinite(v)):
        raise CubeError(f"non-finite {what}")
