"""Training loop for the supervised and self-supervised modes.

Randomness is derived statelessly from ``(seed, epoch, step, sample)`` so a
run resumed from an epoch checkpoint retraces the uninterrupted run exactly.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cube import Rng, poisson_array
from .evaluate import model_depth, rmse
from .losses import LossConfig, equivariance_loss, intensity_anchor, kl_supervised, normalize_histograms, pukl_mc
from .network import ReconstructionNet, load_checkpoint, save_checkpoint
from .operators import ScaleFactor, TransformSpec, random_transform

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    SUP = "sup"
    E_ONLY = "e_only"
    PUKL_ONLY = "pukl_only"
    PUKL_E = "pukl_e"

    @property
    def label(self) -> str:
        return {"sup": "Sup", "e_only": "E", "pukl_only": "PUKL", "pukl_e": "PUKL-E"}[self.value]


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient."""


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    def load_arrays(self, arrays):
        self.m = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("v/")}

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}


def adam_step(state: AdamState, params) -> None:
    """One decoupled-weight-decay Adam update of ``params`` from their ``.grad``."""
    for p in params:
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in parameter {p.name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        value = p.value * (1.0 - state.lr * state.weight_decay)
        p.value = value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.PUKL_E
    epochs: int = 20
    batch_size: int = 2
    loss: LossConfig = LossConfig()
    scale: tuple = (2, 2, 2)
    seed: int = 0
    checkpoint_every: int = 1
    lr: float = 0.01
    weight_decay: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["scale"] = list(self.scale)
        return d

    def fingerprint(self) -> str:
        """Hash of everything that shapes the trajectory; ``epochs`` is left out so runs can be extended."""
        d = self.to_dict()
        d.pop("epochs")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def corrupt(x: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """Mean-preserving Poisson re-corruption ``sigma * Poisson(x / sigma)``."""
    return sigma * poisson_array(np.maximum(x, 0.0) / sigma, rng)


def equivariance_branch(net, h1_hr: ad.Tensor, g: TransformSpec, cfg: LossConfig, rng: Rng | None,
                        scale, add_noise: bool = True):
    """Transform, re-measure and reconstruct: returns ``(h2, h3, L_E)``.

    The re-measured LR cube is a constant on the tape.
    """
    h2 = ad.transform(h1_hr, g)
    hl2 = ad.downsample(h2, scale).value
    hlp2 = corrupt(hl2, cfg.corruption, rng) if add_noise else hl2
    h3 = net(hlp2)
    return h2, h3, equivariance_loss(h2, h3, cfg)


def self_supervised_losses(net, y: np.ndarray, cfg: TrainConfig, rng: Rng):
    """Per-sample ``(L_PUKL, L_E, L)``; terms excluded by the mode are detached."""
    lc = cfg.loss
    scale = ScaleFactor.of(cfg.scale)
    h1 = net(y)
    use_pukl = cfg.mode in (Mode.PUKL_ONLY, Mode.PUKL_E)
    use_e = cfg.mode in (Mode.E_ONLY, Mode.PUKL_E)
    pukl = pukl_mc(net, y, lc, rng.spawn(0), scale=scale, h1_hr=h1 if use_pukl else h1.detach())
    g = random_transform(rng.spawn(1), h1.shape[0], scale.t_scale)
    _, _, le = equivariance_branch(net, h1 if use_e else h1.detach(), g, lc, rng.spawn(2), scale)
    if not use_pukl:
        pukl = pukl.detach()
    if not use_e:
        le = le.detach()
    if cfg.mode == Mode.E_ONLY:
        total = le * lc.alpha
    elif cfg.mode == Mode.PUKL_ONLY:
        total = pukl
    else:
        total = pukl + le * lc.alpha
    return pukl, le, total


def _finish_step(net, losses, state, what):
    loss = ad.mean(losses)
    if not math.isfinite(loss.item()):
        raise TrainingAborted(f"non-finite {what} loss")
    net.zero_grad()
    if loss.requires_grad:
        loss.backward()
    adam_step(state, net.parameters())
    return loss.item()


def self_supervised_step(net, batch, cfg: TrainConfig, rng: Rng, state: AdamState) -> dict:
    """One optimizer step on a batch of LR cubes; returns batch-mean losses."""
    pk, le, tot = [], [], []
    for i, y in enumerate(batch):
        y = y.data if hasattr(y, "data") and not isinstance(y, np.ndarray) else np.asarray(y)
        a, b, c = self_supervised_losses(net, y, cfg, rng.spawn(i))
        pk.append(a.item())
        le.append(b.item())
        tot.append(c)
    total = _finish_step(net, tot, state, cfg.mode.value)
    return {"l_pukl": math.fsum(pk) / len(pk), "l_e": math.fsum(le) / len(le), "l_total": total}


def supervised_loss(net, y, hr_gt, cfg: TrainConfig):
    pred = net(y)
    loss = kl_supervised(pred, normalize_histograms(hr_gt), cfg.loss.eps_floor)
    if cfg.loss.completion:
        loss = loss + intensity_anchor(pred, hr_gt)
    return loss


def supervised_step(net, batch, cfg: TrainConfig, rng: Rng, state: AdamState) -> dict:
    """One optimizer step on a batch of ``(lr, hr_gt)`` pairs."""
    losses = []
    for y, gt in batch:
        if gt is None:
            raise ValueError("supervised training needs hr_gt for every sample")
        y = y.data if not isinstance(y, np.ndarray) else y
        gt = gt.data if not isinstance(gt, np.ndarray) else gt
        losses.append(supervised_loss(net, y, gt, cfg))
    total = _finish_step(net, losses, state, "supervised")
    return {"l_pukl": None, "l_e": None, "l_total": total}


def validation_rmse(net, val_set) -> float | None:
    if not val_set:
        return None
    vals = [rmse(model_depth(net.predict(p.lr)), p.depth_gt) for p in val_set if p.depth_gt is not None]
    return math.fsum(vals) / len(vals) if vals else None


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return math.fsum(xs) / len(xs) if xs else None


@dataclass
class TrainResult:
    net: ReconstructionNet
    history: list
    best_epoch: int | None
    best_state: dict | None


CKPT_LAST = "last"
CKPT_BEST = "best"


def _save(out_dir: Path, tag: str, net, state: AdamState, meta: dict):
    save_checkpoint(out_dir / f"{tag}.spnn", net.state_dict())
    save_checkpoint(out_dir / f"{tag}.opt.spnn", state.arrays())
    tmp = out_dir / f"{tag}.json.tmp"
    tmp.write_text(json.dumps({**meta, "adam": state.hyper()}, sort_keys=True, indent=2))
    os.replace(tmp, out_dir / f"{tag}.json")


def load_training_state(out_dir, tag=CKPT_LAST):
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / f"{tag}.json").read_text())
    params = load_checkpoint(out_dir / f"{tag}.spnn")
    state = AdamState(**meta["adam"])
    state.load_arrays(load_checkpoint(out_dir / f"{tag}.opt.spnn"))
    return meta, params, state


def train(net: ReconstructionNet, dataset, cfg: TrainConfig, val_set=None, out_dir=None,
          resume: bool = False, metrics_path=None) -> TrainResult:
    """Epoch loop with deterministic shuffling, per-epoch metrics and checkpoints.

    ``dataset`` is a sequence of :class:`~spisr.forward.SamplePair`. With
    ``out_dir``, ``last.*`` is written every ``checkpoint_every`` epochs and
    ``best.*`` tracks the lowest validation RMSE.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if cfg.mode == Mode.SUP and any(p.hr_gt is None for p in dataset):
        raise ValueError("mode 'sup' requires hr_gt for every training sample")
    out_dir = Path(out_dir) if out_dir is not None else None
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, start = [], 0
    best = (math.inf, None, None)
    if resume:
        if out_dir is None:
            raise ValueError("resume needs out_dir")
        meta, params, state = load_training_state(out_dir)
        if meta["config_fingerprint"] != cfg.fingerprint():
            raise ValueError("checkpoint was written with a different training config")
        net.load_state_dict(params)
        history = meta["history"]
        start = meta["epoch"]
        if meta.get("best_epoch") is not None:
            best = (meta["best_val"], meta["best_epoch"], load_checkpoint(out_dir / f"{CKPT_BEST}.spnn"))
    root = Rng(cfg.seed)
    n = len(dataset)
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        order = root.spawn(epoch, 0).permutation(n)
        steps = []
        for k in range(0, n, cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            rng = root.spawn(epoch, k // cfg.batch_size + 1)
            if cfg.mode == Mode.SUP:
                batch = [(dataset[i].lr, dataset[i].hr_gt) for i in idx]
                steps.append(supervised_step(net, batch, cfg, rng, state))
            else:
                steps.append(self_supervised_step(net, [dataset[i].lr.data for i in idx], cfg, rng, state))
        val = validation_rmse(net, val_set)
        entry = {
            "epoch": epoch + 1,
            "l_pukl": _mean(s["l_pukl"] for s in steps),
            "l_e": _mean(s["l_e"] for s in steps),
            "l_total": _mean(s["l_total"] for s in steps),
            "val_rmse": val,
            "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
        }
        history.append(entry)
        logger.info("epoch %d/%d %s", epoch + 1, cfg.epochs, entry)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if val is not None and val < best[0]:
            best = (val, epoch + 1, net.state_dict())
        if out_dir is not None:
            meta = {
                "epoch": epoch + 1,
                "history": history,
                "config_fingerprint": cfg.fingerprint(),
                "train_config": cfg.to_dict(),
                "net_config": net.config_dict(),
                "best_epoch": best[1],
                "best_val": best[0] if best[1] is not None else None,
            }
            if best[1] == epoch + 1:
                _save(out_dir, CKPT_BEST, net, state, meta)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                _save(out_dir, CKPT_LAST, net, state, meta)
    return TrainResult(net, history, best[1], best[2])
