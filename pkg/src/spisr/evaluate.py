"""Depth extraction, RMSE and the ablation report."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .cube import DepthImage, PhotonCountingCube
from .forward import PulseShape
from .operators import upsample_trilinear


def _array(h):
    return h.data if isinstance(h, PhotonCountingCube) else np.asarray(h, dtype=np.float64)


def softmax_histogram(h) -> np.ndarray:
    """Per-pixel softmax along the t axis."""
    arr = _array(h)
    z = np.exp(arr - arr.max(axis=0, keepdims=True))
    return z / z.sum(axis=0, keepdims=True)


def soft_argmax_depth(h_norm) -> DepthImage:
    """Expected 1-based bin index under each normalized histogram."""
    arr = _array(h_norm)
    dev = np.max(np.abs(arr.sum(axis=0) - 1.0))
    if dev > 1e-6:
        raise ValueError(f"histograms are not normalized (max deviation {dev:.3g})")
    bins = np.arange(1, arr.shape[0] + 1, dtype=np.float64)
    return DepthImage(np.tensordot(bins, arr, axes=(0, 0)))


def mle_depth(h, pulse: PulseShape | None = None, matched_filter: bool = True) -> DepthImage:
    """Per-pixel peak of the histogram cross-correlated with the pulse.

    Ties resolve to the smallest bin; empty histograms give NaN.
    """
    arr = _array(h)
    if np.any(arr < 0):
        raise ValueError("histogram counts must be non-negative")
    score = arr
    if matched_filter and pulse is not None and len(pulse.kernel) > 1:
        score = correlate1d(arr, np.asarray(pulse.kernel), axis=0, mode="constant", cval=0.0)
    depth = np.argmax(score, axis=0).astype(np.float64) + 1.0
    depth[arr.sum(axis=0) == 0] = np.nan
    return DepthImage(depth)


def rmse(d: DepthImage, d_gt: DepthImage) -> float:
    """(1/S) sqrt(sum of squared errors) on an S x S image.

    Pixels invalid in either image are dropped, in which case the root mean
    over the remaining pixels is returned (identical when nothing is dropped).
    """
    a, b = _depth(d), _depth(d_gt)
    if a.shape != b.shape:
        raise ValueError(f"dims mismatch: {a.shape} vs {b.shape}")
    valid = np.isfinite(a) & np.isfinite(b)
    if not valid.any():
        return math.nan
    err = (a - b)[valid]
    if valid.all() and a.shape[0] == a.shape[1]:
        return math.sqrt(math.fsum(err * err)) / a.shape[0]
    return math.sqrt(math.fsum(err * err) / err.size)


def _depth(d):
    return d.data if isinstance(d, DepthImage) else np.asarray(d, dtype=np.float64)


def model_depth(hr) -> DepthImage:
    return soft_argmax_depth(softmax_histogram(hr))


def trilinear_depth(lr, scale, pulse: PulseShape | None) -> DepthImage:
    return mle_depth(upsample_trilinear(_array(lr), scale), pulse)


@dataclass
class ModelRow:
    name: str
    per_sample: dict
    mean: float

    def to_dict(self):
        return {"model": self.name, "per_sample": self.per_sample, "mean_rmse": self.mean}


@dataclass
class EvalReport:
    rows: list
    config_fingerprint: str = ""
    dataset_fingerprint: str = ""
    label: str = ""
    extra: dict = field(default_factory=dict)

    def row(self, name) -> ModelRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        return {
            "rows": [r.to_dict() for r in self.rows],
            "config_fingerprint": self.config_fingerprint,
            "dataset_fingerprint": self.dataset_fingerprint,
            "label": self.label,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        """Aligned table: one row per condition, one column per model."""
        names = [r.name for r in self.rows]
        head = ["", *names]
        line = [self.label or "RMSE", *(f"{r.mean:.3f}" for r in self.rows)]
        widths = [max(len(a), len(b)) for a, b in zip(head, line)]
        fmt = " | ".join(f"{{:>{w}}}" for w in widths)
        sep = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt.format(*head), sep, fmt.format(*line)]) + "\n"


def _sample_id(pair, i):
    return str(pair.meta.get("id", i)) if hasattr(pair, "meta") else str(i)


def build_report(models: dict, test_set, scale, pulse: PulseShape | None, label: str = "",
                 config_fingerprint: str = "", dataset_fingerprint: str = "") -> EvalReport:
    """RMSE table over ``test_set`` (sequence of SamplePair with ``depth_gt``).

    ``models`` maps a display name to either ``"trilinear"`` or a callable that
    returns the HR cube for an LR cube. Rows keep the insertion order of
    ``models``; per-sample values are keyed by sample id.
    """
    rows = []
    for name, model in models.items():
        per = {}
        for i, pair in enumerate(test_set):
            if model == "trilinear":
                d = trilinear_depth(pair.lr, scale, pulse)
            else:
                d = model_depth(model(pair.lr))
            per[_sample_id(pair, i)] = rmse(d, pair.depth_gt)
        per = dict(sorted(per.items()))
        rows.append(ModelRow(name, per, math.fsum(per.values()) / len(per)))
    return EvalReport(rows, config_fingerprint, dataset_fingerprint, label)


def fingerprint_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
