"""On-disk formats and experiment configuration.

SPC1 cube files::

    b"SPC1" | version u16 | dtype u8 (0 = f64, 1 = u32) | T, S, S u32 | payload | crc32(payload) u32

all little-endian, payload t-major then row-major. Depth images are 16-bit
binary PGM (P5); colour previews are 8-bit PPM (P6).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cube import CubeDims, PhotonCountingCube
from .network import SKIP_MODES

SPC1_MAGIC = b"SPC1"
SPC1_VERSION = 1
DTYPE_F64, DTYPE_U32 = 0, 1
_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_U32: np.dtype("<u4")}
_HEADER = struct.Struct("<4sHBIII")


class FormatError(ValueError):
    """Malformed or corrupted file."""


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field or line."""


# ---------------------------------------------------------------- SPC1


def cube_bytes(data, dtype: int = DTYPE_F64) -> bytes:
    arr = data.data if isinstance(data, PhotonCountingCube) else np.asarray(data)
    if arr.ndim != 3:
        raise FormatError(f"SPC1 stores 3-D cubes, got shape {arr.shape}")
    if dtype not in _DTYPES:
        raise FormatError(f"unknown SPC1 dtype code {dtype}")
    if dtype == DTYPE_U32:
        if np.any(arr < 0) or np.any(arr != np.floor(arr)) or np.any(arr > 0xFFFFFFFF):
            raise FormatError("u32 cubes need non-negative integer counts")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    t, h, w = arr.shape
    return _HEADER.pack(SPC1_MAGIC, SPC1_VERSION, dtype, t, h, w) + payload + struct.pack(
        "<I", zlib.crc32(payload))


def parse_cube(blob: bytes) -> tuple[np.ndarray, int]:
    """Returns ``(array, dtype code)``; u32 payloads come back as uint32."""
    if len(blob) < _HEADER.size + 4:
        raise FormatError("file too short for an SPC1 header")
    magic, version, dtype, t, h, w = _HEADER.unpack_from(blob)
    if magic != SPC1_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != SPC1_VERSION:
        raise FormatError(f"unsupported SPC1 version {version}")
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype}")
    n = t * h * w * _DTYPES[dtype].itemsize
    if len(blob) != _HEADER.size + n + 4:
        raise FormatError(f"payload size mismatch for dims {(t, h, w)}")
    payload = blob[_HEADER.size:_HEADER.size + n]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise FormatError("CRC32 mismatch: file is corrupted")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(t, h, w).copy()
    return arr.astype(arr.dtype.newbyteorder("=")), dtype


def write_cube(path, data, dtype: int = DTYPE_F64) -> None:
    Path(path).write_bytes(cube_bytes(data, dtype))


def read_cube(path) -> tuple[np.ndarray, int]:
    return parse_cube(Path(path).read_bytes())


def load_cube(path, gamma: float | None = None) -> PhotonCountingCube:
    """Read an SPC1 file as a float cube; raw u32 counts are scaled by ``gamma`` when given."""
    arr, dtype = read_cube(path)
    arr = arr.astype(np.float64)
    if dtype == DTYPE_U32 and gamma is not None:
        arr = arr * gamma
    return PhotonCountingCube(arr)


# ---------------------------------------------------------------- images


def quantize_depth(depth, depth_min: float, depth_range: float) -> np.ndarray:
    """Depth -> 16-bit code; NaN (invalid) pixels map to 0."""
    if depth_range <= 0:
        raise ValueError("depth_range must be positive")
    d = np.asarray(depth, dtype=np.float64)
    q = np.rint((d - depth_min) / depth_range * 65535.0)
    q = np.where(np.isfinite(q), np.clip(q, 0, 65535), 0)
    return q.astype(np.uint16)


def write_pgm16(path, depth, depth_min: float, depth_range: float) -> np.ndarray:
    q = quantize_depth(depth, depth_min, depth_range)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.astype(">u2").tobytes())
    return q


def _pgm_tokens(blob: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_pgm16(path, depth_min: float | None = None, depth_range: float | None = None) -> np.ndarray:
    """Read a P5 image; with ``depth_min``/``depth_range`` the codes are mapped to depth."""
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), off = _pgm_tokens(blob, 4)
    if magic != b"P5":
        raise FormatError(f"not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    dt = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dt).itemsize
    if len(blob) - off < n:
        raise FormatError("PGM payload truncated")
    codes = np.frombuffer(blob, dtype=dt, count=w * h, offset=off).reshape(h, w).astype(np.float64)
    if depth_min is None or depth_range is None:
        return codes
    return codes / maxval * depth_range + depth_min


# five-stop perceptual ramp (dark blue -> yellow), linear in between
_RAMP = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]],
                 dtype=np.float64)


def colormap(values, vmin: float, vmax: float) -> np.ndarray:
    """Map to ``(H, W, 3)`` uint8 colours; NaN becomes black."""
    v = np.asarray(values, dtype=np.float64)
    span = vmax - vmin if vmax > vmin else 1.0
    x = np.clip((v - vmin) / span, 0.0, 1.0) * (len(_RAMP) - 1)
    x = np.where(np.isfinite(x), x, 0.0)
    lo = np.minimum(np.floor(x).astype(np.int64), len(_RAMP) - 2)
    frac = (x - lo)[..., None]
    rgb = _RAMP[lo] * (1.0 - frac) + _RAMP[lo + 1] * frac
    rgb[~np.isfinite(v)] = 0.0
    return np.rint(rgb).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (magic, w, h, _), off = _pgm_tokens(blob, 4)
    if magic != b"P6":
        raise FormatError(f"not a binary PPM (magic {magic!r})")
    w, h = int(w), int(h)
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()


# ---------------------------------------------------------------- JSON


def dumps(obj, indent: int | None = 2) -> str:
    """UTF-8 JSON with sorted keys; non-finite floats become null."""
    return json.dumps(_finite(obj), sort_keys=True, indent=indent, ensure_ascii=False)


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def canonical_hash(obj) -> str:
    blob = json.dumps(_finite(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- config

MODES = ("sup", "e_only", "pukl_only", "pukl_e")
_INPUT_PATHS = ("dataset", "depth_images", "checkpoint")
_HASH_EXCLUDED = ("paths", "threads")


@dataclass
class ExperimentConfig:
    lr_dims: list = field(default_factory=lambda: [32, 16, 16])
    hr_dims: list = field(default_factory=lambda: [64, 32, 32])
    scale: list = field(default_factory=lambda: [2, 2, 2])
    sbr: float | list = 1.0
    gamma: float = 0.005
    sigma: float | None = None
    alpha: float = 1.0
    tau: float = 1e-2
    pulse_fwhm: float = 3.0
    illuminations: float = 100.0
    sizes: dict = field(default_factory=lambda: {"train": 50, "val": 8, "test": 16})
    mode: str = "pukl_e"
    epochs: int = 20
    batch_size: int = 2
    lr: float = 0.01
    weight_decay: float = 1e-6
    channels: int = 16
    feature_layers: int = 2
    skip: str = "identity"
    zero_head: bool = True
    completion: bool = True
    seed: int = 0
    depth_min: float = 0.0
    depth_range: float = 64.0
    threads: int | None = None
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lr_dims", "hr_dims", "scale"):
            v = getattr(self, name)
            if not (isinstance(v, list) and len(v) == 3 and all(isinstance(x, int) and x > 0 for x in v)):
                raise ConfigError(f"field '{name}': expected three positive integers, got {v!r}")
        expect = [a * s for a, s in zip(self.lr_dims, self.scale)]
        if expect != self.hr_dims:
            raise ConfigError(f"field 'hr_dims': {self.hr_dims} != lr_dims x scale = {expect}")
        if self.lr_dims[1] != self.lr_dims[2]:
            raise ConfigError(f"field 'lr_dims': lateral grid must be square, got {self.lr_dims}")
        for s in self.sbr_values:
            if not (isinstance(s, (int, float)) and s > 0):
                raise ConfigError(f"field 'sbr': values must be positive numbers, got {self.sbr!r}")
        for name in ("gamma", "tau", "illuminations", "lr", "depth_range"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"field '{name}': must be a positive number, got {v!r}")
        if self.sigma is not None and not (isinstance(self.sigma, (int, float)) and self.sigma > 0):
            raise ConfigError(f"field 'sigma': must be positive or null, got {self.sigma!r}")
        if self.mode not in MODES:
            raise ConfigError(f"field 'mode': expected one of {MODES}, got {self.mode!r}")
        if not isinstance(self.sizes, dict) or set(self.sizes) != {"train", "val", "test"}:
            raise ConfigError("field 'sizes': expected keys train, val, test")
        for k, v in self.sizes.items():
            if not (isinstance(v, int) and v >= 0):
                raise ConfigError(f"field 'sizes.{k}': must be a non-negative integer, got {v!r}")
        for name in ("epochs", "batch_size", "channels", "feature_layers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < (0 if name == "epochs" else 1):
                raise ConfigError(f"field '{name}': invalid value {v!r}")
        if self.skip not in SKIP_MODES:
            raise ConfigError(f"field 'skip': expected one of {SKIP_MODES}, got {self.skip!r}")
        for name in ("zero_head", "completion"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"field '{name}': must be true or false")
        if not isinstance(self.seed, int):
            raise ConfigError(f"field 'seed': must be an integer, got {self.seed!r}")
        if not isinstance(self.paths, dict):
            raise ConfigError("field 'paths': expected an object")

    @property
    def sbr_values(self) -> list:
        return list(self.sbr) if isinstance(self.sbr, list) else [self.sbr]

    @property
    def hr_cube_dims(self) -> CubeDims:
        return CubeDims(*self.hr_dims)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def semantic_dict(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in _HASH_EXCLUDED}

    def hash(self) -> str:
        """Hash of the canonical JSON of every field that affects results."""
        return canonical_hash(self.semantic_dict())[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"field '{unknown[0]}': unknown configuration field")
        d = dict(d)
        if "paths" in d and base_dir is not None and isinstance(d["paths"], dict):
            d["paths"] = {k: str((Path(base_dir) / v).resolve()) for k, v in d["paths"].items()}
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        for key in _INPUT_PATHS:
            p = cfg.paths.get(key)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"field 'paths.{key}': {p} does not exist")
        return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return ExperimentConfig.from_dict(raw, base_dir=path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- manifest

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "spisr-dataset"


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    return canonical_hash(body)[:16]


def write_manifest(directory, manifest: dict) -> str:
    manifest = dict(manifest)
    manifest["manifest_hash"] = manifest_hash(manifest)
    write_json(Path(directory) / MANIFEST_NAME, manifest)
    return manifest["manifest_hash"]


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path}: field 'format' must be {MANIFEST_FORMAT!r}")
    if "splits" not in manifest:
        raise ConfigError(f"{path}: missing field 'splits'")
    return manifest
