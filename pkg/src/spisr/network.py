"""Reconstruction network: a small 3-D up-projection (back-projection) network.

Layout, for an LR cube ``x`` of shape ``(T, S, S)``::

    f  = softplus(conv3(x)) -> ... -> softplus(conv3(f))      feature layers
    h0 = softplus(tconv(f))                                    up-project
    l0 = softplus(conv_s(h0))                                  down-project
    h  = h0 + tconv(l0 - f)                                    residual back-projection
    y  = softplus(conv3(h) + skip(x))                          positive output head

``skip`` is ``upsample_trilinear(x)`` (``"trilinear"``), its inverse softplus
(``"identity"``: with a zero head the untrained network returns the trilinear
up-sampling exactly) or absent (``"none"``).

``conv_s``/``tconv`` use kernel = stride = the scale factor along each axis.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .cube import CubeError, PhotonCountingCube, Rng
from .operators import ScaleFactor

SPNN_MAGIC = b"SPNN"
SPNN_VERSION = 1
SKIP_MODES = ("none", "trilinear", "identity")
SKIP_FLOOR = 1e-6


@dataclass(frozen=True)
class NetConfig:
    channels: int = 16
    feature_layers: int = 2
    scale: tuple[int, int, int] = (2, 2, 2)
    skip: str = "trilinear"
    zero_head: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.skip not in SKIP_MODES:
            raise ValueError(f"skip must be one of {SKIP_MODES}, got {self.skip!r}")


class ReconstructionNet:
    def __init__(self, config: NetConfig = NetConfig(), lr_shape=None):
        self.config = config
        self.scale = ScaleFactor.of(config.scale)
        self.lr_shape = tuple(lr_shape) if lr_shape is not None else None
        self._params: dict[str, ad.Parameter] = {}
        rng = Rng(config.init_seed)
        c, k = config.channels, tuple(self.scale)
        cin = 1
        for i in range(config.feature_layers):
            self._conv(f"feat{i}", rng, c, cin, (3, 3, 3))
            cin = c
        self._conv("up0", rng, c, c, k, transposed=True)
        self._conv("down0", rng, c, c, k)
        self._conv("up1", rng, c, c, k, transposed=True)
        self._conv("head", rng, 1, c, (3, 3, 3))
        if config.zero_head:
            self._params["head.weight"].value[...] = 0.0

    def _conv(self, name, rng, cout, cin, k, transposed=False):
        fan_in = cin * int(np.prod(k))
        bound = np.sqrt(6.0 / fan_in)
        shape = (cin, cout) + tuple(k) if transposed else (cout, cin) + tuple(k)
        w = (2.0 * rng.uniform(shape) - 1.0) * bound
        self._add(f"{name}.weight", w)
        self._add(f"{name}.bias", np.zeros(cout))

    def _add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = ad.Parameter(value, name)

    def parameters(self) -> list[ad.Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, ad.Parameter]:
        return dict(self._params)

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def p(self, name) -> ad.Parameter:
        return self._params[name]

    def forward(self, x) -> ad.Tensor:
        """Map an LR cube (array, cube or tensor of shape ``(T, S, S)``) to the HR tensor."""
        if isinstance(x, PhotonCountingCube):
            x = x.data
        x = ad.as_tensor(x)
        if x.value.ndim != 3:
            raise CubeError(f"network input must be (T, S, S), got {x.shape}")
        if self.lr_shape is not None and x.shape != self.lr_shape:
            raise CubeError(f"network expects LR shape {self.lr_shape}, got {x.shape}")
        s = tuple(self.scale)
        xin = ad.reshape(x, (1,) + x.shape)
        f = xin
        for i in range(self.config.feature_layers):
            f = ad.softplus(ad.conv3d(f, self.p(f"feat{i}.weight"), self.p(f"feat{i}.bias"), pad=1))
        h0 = ad.softplus(ad.conv_transpose3d(f, self.p("up0.weight"), self.p("up0.bias"), stride=s))
        l0 = ad.softplus(ad.conv3d(h0, self.p("down0.weight"), self.p("down0.bias"), stride=s))
        h = h0 + ad.conv_transpose3d(l0 - f, self.p("up1.weight"), self.p("up1.bias"), stride=s)
        z = ad.conv3d(h, self.p("head.weight"), self.p("head.bias"), pad=1)
        if self.config.skip != "none":
            up = ad.upsample_trilinear(xin, s)
            if self.config.skip == "identity":
                up = ad.softplus_inverse(up, SKIP_FLOOR)
            z = z + up
        y = ad.softplus(z)
        return ad.reshape(y, y.shape[1:])

    __call__ = forward

    def predict(self, lr) -> PhotonCountingCube:
        out = self.forward(lr.data if isinstance(lr, PhotonCountingCube) else lr)
        return PhotonCountingCube(out.value)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self._params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.value.shape}")
            p.value = v.copy()

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["scale"] = list(d["scale"])
        return d


def write_spnn(arrays: dict[str, np.ndarray], fh):
    fh.write(SPNN_MAGIC)
    fh.write(struct.pack("<HI", SPNN_VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_spnn(fh) -> dict[str, np.ndarray]:
    if fh.read(4) != SPNN_MAGIC:
        raise ValueError("not an SPNN file (bad magic)")
    version, count = struct.unpack("<HI", fh.read(6))
    if version != SPNN_VERSION:
        raise ValueError(f"unsupported SPNN version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        name = fh.read(n).decode("utf-8")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        buf = fh.read(8 * size)
        if len(buf) != 8 * size:
            raise ValueError(f"truncated SPNN payload for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        write_spnn(arrays, fh)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_spnn(fh)


def spnn_bytes(arrays) -> bytes:
    buf = io.BytesIO()
    write_spnn(arrays, buf)
    return buf.getvalue()
