"""Dataset, training and evaluation drivers behind the command line.

A dataset directory holds ``manifest.json`` plus one folder per split::

    train/000.lr.spc1  000.hr.spc1  000.depth.spc1  000.depth.pgm
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from . import io
from .cube import CubeDims, DepthImage, PhotonCountingCube, Rng
from .evaluate import build_report, mle_depth, model_depth, rmse, trilinear_depth
from .forward import (PulseShape, SamplePair, downsample_pulse, generate_scene_dataset, make_pulse,
                      simulate_pair)
from .losses import LossConfig
from .network import NetConfig, ReconstructionNet, load_checkpoint
from .operators import ScaleFactor
from .trainer import Mode, TrainConfig, train

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def net_config(cfg: io.ExperimentConfig) -> NetConfig:
    return NetConfig(channels=cfg.channels, feature_layers=cfg.feature_layers, scale=tuple(cfg.scale),
                     skip=cfg.skip, zero_head=cfg.zero_head, init_seed=cfg.seed)


def train_config(cfg: io.ExperimentConfig, mode: str | None = None) -> TrainConfig:
    loss = LossConfig(alpha=cfg.alpha, tau=cfg.tau, gamma=cfg.gamma, sigma=cfg.sigma,
                      completion=cfg.completion)
    return TrainConfig(mode=Mode(mode or cfg.mode), epochs=cfg.epochs, batch_size=cfg.batch_size, loss=loss,
                       scale=tuple(cfg.scale), seed=cfg.seed, lr=cfg.lr, weight_decay=cfg.weight_decay)


def pulse_of(cfg: io.ExperimentConfig) -> PulseShape:
    return make_pulse(cfg.pulse_fwhm)


# ---------------------------------------------------------------- simulate


def _depth_image_scenes(cfg, count, offset, pulse):
    files = sorted(Path(cfg.paths["depth_images"]).glob("*.pgm"))
    if not files:
        raise io.ConfigError(f"field 'paths.depth_images': no .pgm files in {cfg.paths['depth_images']}")
    dims = cfg.hr_cube_dims
    margin = float(pulse.center)
    out = []
    for i in range(count):
        path = files[(offset + i) % len(files)]
        depth = io.read_pgm16(path, cfg.depth_min, cfg.depth_range)
        if depth.shape != (dims.rows, dims.cols):
            raise io.ConfigError(f"{path.name}: image is {depth.shape}, HR grid is {(dims.rows, dims.cols)}")
        out.append(np.clip(depth, 1.0 + margin, dims.t_bins - margin))
    return out


def simulate_split(cfg: io.ExperimentConfig, split: str, sbr: float, pulse: PulseShape) -> list[SamplePair]:
    count = cfg.sizes[split]
    if count == 0:
        return []
    rng = Rng(cfg.seed).spawn(SPLITS.index(split) + 1, int(round(sbr * 1e6)))
    dims = cfg.hr_cube_dims
    if "depth_images" in cfg.paths:
        offset = sum(cfg.sizes[s] for s in SPLITS[:SPLITS.index(split)])
        pairs = []
        for i, depth in enumerate(_depth_image_scenes(cfg, count, offset, pulse)):
            pairs.append(simulate_pair(depth, np.ones_like(depth), dims, tuple(cfg.scale), sbr, cfg.gamma,
                                       cfg.illuminations, pulse, rng.spawn(i)))
        return pairs
    return generate_scene_dataset(count, dims, tuple(cfg.scale), sbr, cfg.gamma, rng, pulse,
                                  illuminations=cfg.illuminations)


def _write_sample(root: Path, split: str, i: int, pair: SamplePair, cfg) -> dict:
    stem = f"{split}/{i:03d}"
    entry = {"id": f"{split}-{i:03d}", "lr": f"{stem}.lr.spc1", "hr_gt": None, "depth_gt": None,
             "sbr": pair.meta.get("sbr"), "gamma": pair.meta.get("gamma"),
             "lr_dims": list(pair.lr.dims.shape)}
    io.write_cube(root / entry["lr"], pair.lr)
    if pair.hr_gt is not None:
        entry["hr_gt"] = f"{stem}.hr.spc1"
        io.write_cube(root / entry["hr_gt"], pair.hr_gt)
        entry["hr_dims"] = list(pair.hr_gt.dims.shape)
    if pair.depth_gt is not None:
        entry["depth_gt"] = f"{stem}.depth.spc1"
        io.write_cube(root / entry["depth_gt"], pair.depth_gt.data[None])
        entry["depth_pgm"] = f"{stem}.depth.pgm"
        io.write_pgm16(root / entry["depth_pgm"], pair.depth_gt.data, cfg.depth_min, cfg.depth_range)
    entry["digest"] = {k: io.file_digest(root / entry[k]) for k in ("lr", "hr_gt", "depth_gt") if entry[k]}
    return entry


def simulate(cfg: io.ExperimentConfig, out_dir) -> dict:
    """Write every split for every configured SBR; returns ``{sbr: manifest hash}``.

    With several SBR values each gets its own sub-directory ``sbr-<value>``.
    """
    out_dir = Path(out_dir)
    pulse = pulse_of(cfg)
    hashes = {}
    for sbr in cfg.sbr_values:
        root = out_dir if len(cfg.sbr_values) == 1 else out_dir / f"sbr-{sbr:g}"
        splits = {}
        for split in SPLITS:
            (root / split).mkdir(parents=True, exist_ok=True)
            pairs = simulate_split(cfg, split, float(sbr), pulse)
            splits[split] = [_write_sample(root, split, i, p, cfg) for i, p in enumerate(pairs)]
        manifest = {
            "format": io.MANIFEST_FORMAT,
            "version": 1,
            "seed": cfg.seed,
            "sbr": float(sbr),
            "config_hash": cfg.hash(),
            "config": cfg.semantic_dict(),
            "splits": splits,
        }
        hashes[float(sbr)] = io.write_manifest(root, manifest)
    return hashes


# ---------------------------------------------------------------- load


def _load_entry(root: Path, entry: dict, need: tuple = ()) -> SamplePair:
    for key in ("id", "lr"):
        if key not in entry:
            raise io.ConfigError(f"manifest entry is missing field '{key}'")
    for key in need:
        if not entry.get(key):
            raise io.ConfigError(f"sample {entry['id']}: missing field '{key}'")
    lr = io.load_cube(root / entry["lr"], gamma=entry.get("gamma"))
    hr = io.load_cube(root / entry["hr_gt"]) if entry.get("hr_gt") else None
    depth = None
    if entry.get("depth_gt"):
        arr, _ = io.read_cube(root / entry["depth_gt"])
        depth = DepthImage(arr[0].astype(np.float64))
    meta = {k: v for k, v in entry.items() if k not in ("lr", "hr_gt", "depth_gt")}
    return SamplePair(lr, hr, depth, meta)


def load_split(data_dir, split: str, need: tuple = ()) -> tuple[list[SamplePair], dict]:
    root = Path(data_dir)
    manifest = io.read_manifest(root)
    entries = manifest["splits"].get(split, [])
    return [_load_entry(root, e, need) for e in entries], manifest


# ---------------------------------------------------------------- train


def run_training(cfg: io.ExperimentConfig, data_dir, out_dir, mode: str | None = None,
                 resume: bool = False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg = train_config(cfg, mode)
    need = ("hr_gt",) if tcfg.mode == Mode.SUP else ()
    train_set, manifest = load_split(data_dir, "train", need)
    if not train_set:
        raise io.ConfigError("field 'splits.train': dataset has no training samples")
    val_set, _ = load_split(data_dir, "val")
    val_set = [p for p in val_set if p.depth_gt is not None]
    net = ReconstructionNet(net_config(cfg))
    metrics = out_dir / "metrics.jsonl"
    if resume:
        if not (out_dir / "last.json").exists():
            raise io.ConfigError(f"--resume: no checkpoint last.json in {out_dir}")
        meta = json.loads((out_dir / "last.json").read_text())
        if meta.get("config_fingerprint") != tcfg.fingerprint():
            raise io.ConfigError(f"--resume: checkpoint in {out_dir} was written with a different training config")
        metrics.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in meta["history"]))
    elif metrics.exists():
        metrics.unlink()
    io.write_json(out_dir / "run.json", {
        "config_hash": cfg.hash(),
        "manifest_hash": manifest.get("manifest_hash"),
        "mode": tcfg.mode.value,
        "train_config": tcfg.to_dict(),
        "net_config": net.config_dict(),
    })
    return train(net, train_set, tcfg, val_set=val_set or None, out_dir=out_dir, resume=resume,
                 metrics_path=metrics)


# ---------------------------------------------------------------- eval


def load_model(cfg: io.ExperimentConfig, checkpoint) -> ReconstructionNet:
    """Checkpoint ``x.spnn`` with its ``x.json`` sidecar; the network config must match ``cfg``."""
    checkpoint = Path(checkpoint)
    net = ReconstructionNet(net_config(cfg))
    sidecar = checkpoint.with_suffix(".json")
    if sidecar.exists():
        saved = json.loads(sidecar.read_text()).get("net_config")
        expected = net.config_dict()
        if saved is not None:
            diff = sorted(k for k in expected if k != "init_seed" and saved.get(k) != expected[k])
            if diff:
                raise io.ConfigError(f"checkpoint {checkpoint.name} does not match the config: field "
                                     f"'{diff[0]}' is {saved.get(diff[0])!r}, config has {expected[diff[0]]!r}")
    try:
        net.load_state_dict(load_checkpoint(checkpoint))
    except (ValueError, OSError) as exc:
        raise io.ConfigError(f"checkpoint {checkpoint}: {exc}") from None
    return net


def lr_mle_depth(lr, scale, pulse: PulseShape) -> DepthImage:
    """MLE depth of the LR cube expressed in HR bins on the HR grid (nearest laterally)."""
    s = ScaleFactor.of(scale)
    d = mle_depth(lr, downsample_pulse(pulse, s.t_scale)).data
    d = (d - 0.5) * s.t_scale + 0.5
    d = np.repeat(np.repeat(d, s.row_scale, axis=0), s.col_scale, axis=1)
    return DepthImage(d)


def _export(path_stem: Path, depth: DepthImage, cfg, info: dict):
    io.write_pgm16(path_stem.with_suffix(".pgm"), depth.data, cfg.depth_min, cfg.depth_range)
    io.write_ppm(path_stem.with_suffix(".ppm"), io.colormap(depth.data, cfg.depth_min,
                                                            cfg.depth_min + cfg.depth_range))
    io.write_json(path_stem.with_suffix(".json"), info)


def run_eval(cfg: io.ExperimentConfig, data_dir, out_dir, models: dict, export: bool = True):
    """``models`` maps a row name to ``"trilinear"`` or a checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_set, manifest = load_split(data_dir, "test", ("depth_gt",))
    if not test_set:
        raise io.ConfigError("field 'splits.test': dataset has no test samples")
    pulse = pulse_of(cfg)
    scale = tuple(cfg.scale)
    callables = {}
    for name, spec in models.items():
        callables[name] = "trilinear" if spec == "trilinear" else load_model(cfg, spec).predict
    label = f"SBR={manifest.get('sbr', cfg.sbr_values[0]):g}"
    report = build_report(callables, test_set, scale, pulse, label=label, config_fingerprint=cfg.hash(),
                          dataset_fingerprint=manifest.get("manifest_hash", ""))
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    if export:
        for pair in test_set:
            sid = pair.meta["id"]
            d = out_dir / "depth" / sid
            d.mkdir(parents=True, exist_ok=True)
            maps = {"lr_mle": lr_mle_depth(pair.lr, scale, pulse)}
            for name, model in callables.items():
                maps[name] = (trilinear_depth(pair.lr, scale, pulse) if model == "trilinear"
                              else model_depth(model(pair.lr)))
            for name, depth in maps.items():
                err = rmse(depth, pair.depth_gt)
                _export(d / _safe(name), depth, cfg, {
                    "sample": sid, "model": name, "rmse": err if math.isfinite(err) else None,
                    "depth_min": cfg.depth_min, "depth_range": cfg.depth_range})
    return report


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name.lower())


# ---------------------------------------------------------------- ingest / export


def ingest(cube_path, meta: dict, data_dir, scale, split: str = "train") -> dict:
    """Register a measured LR cube (no ground truth) into the manifest of ``data_dir``."""
    for key in ("sbr", "gamma"):
        if key not in meta:
            raise io.ConfigError(f"metadata is missing field '{key}'")
        if not isinstance(meta[key], (int, float)) or meta[key] <= 0:
            raise io.ConfigError(f"metadata field '{key}' must be a positive number")
    if split not in SPLITS:
        raise io.ConfigError(f"unknown split {split!r}")
    arr, dtype = io.read_cube(cube_path)
    s = ScaleFactor.of(scale)
    dims = CubeDims(*arr.shape)
    if arr.dtype.kind == "f" and (not np.all(np.isfinite(arr)) or np.any(arr < 0)):
        raise io.FormatError("cube holds negative or non-finite values")
    gamma = float(meta["gamma"])
    cube = PhotonCountingCube(arr.astype(np.float64) * (gamma if dtype == io.DTYPE_U32 else 1.0))
    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    try:
        manifest = io.read_manifest(root)
    except io.ConfigError:
        if (root / io.MANIFEST_NAME).exists():
            raise
        manifest = {"format": io.MANIFEST_FORMAT, "version": 1, "splits": {k: [] for k in SPLITS}}
    entries = manifest["splits"].setdefault(split, [])
    sid = str(meta.get("id", f"ingest-{len(entries):03d}"))
    if any(e["id"] == sid for e in entries):
        raise io.ConfigError(f"sample id {sid!r} already present in split {split!r}")
    (root / "ingested").mkdir(exist_ok=True)
    rel = f"ingested/{_safe(sid)}.lr.spc1"
    io.write_cube(root / rel, cube)
    entry = {"id": sid, "lr": rel, "hr_gt": None, "depth_gt": None, "sbr": float(meta["sbr"]),
             "gamma": gamma, "lr_dims": list(dims.shape),
             "hr_dims": list(dims.scaled(tuple(s)).shape), "source": Path(cube_path).name,
             "digest": {"lr": io.file_digest(root / rel)}}
    entries.append(entry)
    manifest["splits"] = {k: manifest["splits"].get(k, []) for k in SPLITS}
    io.write_manifest(root, manifest)
    return entry


def export_depth(cube_path, out_stem, cfg: io.ExperimentConfig) -> DepthImage:
    """A ``1 x S x S`` SPC1 file is taken as a depth image; otherwise the MLE depth is extracted."""
    arr, _ = io.read_cube(cube_path)
    if arr.shape[0] == 1:
        depth = DepthImage(arr[0].astype(np.float64))
    else:
        depth = mle_depth(PhotonCountingCube(arr.astype(np.float64)), pulse_of(cfg))
    _export(Path(out_stem), depth, cfg, {"source": Path(cube_path).name, "depth_min": cfg.depth_min,
                                         "depth_range": cfg.depth_range})
    return depth

