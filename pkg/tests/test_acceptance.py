"""Acceptance criteria 1-9; each test carries ``@criterion(n, title)`` and
the terminal summary prints one pass/fail line per criterion."""

import io as _io
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import poisson

from spisr import autodiff as ad
from spisr import io
from spisr.cli import main
from spisr.cube import CubeDims, PhotonCountingCube, Rng, poisson_array
from spisr.evaluate import rmse, soft_argmax_depth, softmax_histogram
from spisr.forward import measure
from spisr.losses import (LossConfig, equivariance_loss, intensity_anchor, kl_supervised, normalize_histograms,
                          pukl_exact_batch, pukl_mc)
from spisr.network import NetConfig, ReconstructionNet, read_spnn, spnn_bytes
from spisr.operators import (TransformSpec, apply_transform, apply_transform_lr, downsample, random_transform,
                             upsample_nearest)
from spisr.trainer import TrainConfig, equivariance_branch, train

from _util import param_gradcheck

criterion = pytest.mark.criterion
ROOT = Path(__file__).resolve().parents[1]


# ---------------------------------------------------------------- 1


def _enumeration_oracle(X):
    """E[-sum X log(Y + 1)], Y ~ Poisson(X), truncated at the 1 - 1e-10 quantile."""
    total = 0.0
    for lam in X:
        k = np.arange(int(poisson.ppf(1 - 1e-10, lam)) + 1)
        total -= lam * math.fsum(poisson.pmf(k, lam) * np.log(k + 1.0))
    return total


@criterion(1, "PUKL unbiasedness, X=[3,5,2,7], f(v)=v+1, 1e6 draws, < 1% rel, < 60 s")
def test_c1_pukl_unbiased(record_property):
    t0 = time.perf_counter()
    X = np.array([3.0, 5.0, 2.0, 7.0])
    n = 1_000_000
    Y = poisson_array(np.tile(X, n), Rng(20240601)).reshape(n, 4)
    mc = float(np.mean(pukl_exact_batch(lambda v: v + 1.0, Y)))
    want = _enumeration_oracle(X)
    rel = abs(mc - want) / abs(want)
    elapsed = time.perf_counter() - t0
    record_property("rel_err", f"{rel:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert rel < 0.01
    assert elapsed < 60


# ---------------------------------------------------------------- 2

_SHAPES = [(2, 4, 4, 4), (1, 6, 4, 2), (3, 2, 6, 4)]


def _probe(arr, rng, n=30):
    return rng.choice(arr.size, size=min(n, arr.size), replace=False)


def _op_cases(shape, rng):
    """(name, fn, inputs) per differentiable op for one input shape."""
    c = shape[0]
    pos = lambda s: rng.uniform(0.3, 2.0, s)
    x = rng.standard_normal(shape)
    w3 = rng.standard_normal((2, c, 3, 3, 3))
    w2 = rng.standard_normal((2, c, 2, 2, 2))
    wt = rng.standard_normal((c, 2, 2, 2, 2))
    b = rng.standard_normal(2)
    even = tuple(n - n % 2 for n in shape[1:])
    xe = x[:, :even[0], :even[1], :even[2]].copy()
    sq = (shape[0], shape[1], 4, 4)
    cases = [
        ("add", lambda a, b_: ad.total(ad.log(a + b_ + 10.0)), [x, rng.standard_normal(shape)]),
        ("sub", lambda a, b_: ad.total(ad.log(a - b_ + 10.0)), [x, rng.standard_normal(shape)]),
        ("mul", lambda a, b_: ad.total(ad.log(a * b_ + 10.0)), [x, rng.standard_normal(shape)]),
        ("div", lambda a, b_: ad.total(a / b_), [x, pos(shape)]),
        ("log", lambda a: ad.total(ad.log(a) * 1.3), [pos(shape)]),
        ("log_floor", lambda a: ad.total(ad.log_floor(a, 1e-3)), [pos(shape)]),
        ("softplus", lambda a: ad.total(ad.log(ad.softplus(a))), [x * 3]),
        ("softplus_inverse", lambda a: ad.total(ad.softplus(ad.softplus_inverse(a, 1e-6)) * ad.log(a)), [pos(shape)]),
        ("sum_axis", lambda a: ad.total(ad.log(ad.sum_axis(a * a, 1) + 1.0)), [x]),
        ("reshape", lambda a: ad.total(ad.log(ad.reshape(a, (-1,)) * ad.reshape(a, (-1,)) + 1.0)), [x]),
        ("conv3d", lambda a, w, bb: ad.total(ad.log(ad.softplus(ad.conv3d(a, w, bb, pad=1)))), [x, w3, b]),
        ("conv3d_block", lambda a, w: ad.total(ad.log(ad.softplus(ad.conv3d(a, w, stride=2)))), [xe, w2]),
        ("conv3d_strided", lambda a, w: ad.total(ad.log(ad.softplus(ad.conv3d(a, w, stride=2, pad=1)))), [x, w3]),
        ("conv_transpose3d", lambda a, w, bb: ad.total(ad.log(ad.softplus(ad.conv_transpose3d(a, w, bb)))),
         [x, wt, b]),
        ("downsample", lambda a: ad.total(ad.log(ad.softplus(ad.downsample(a, 2)))), [xe]),
        ("upsample_trilinear", lambda a: ad.total(ad.log(ad.softplus(ad.upsample_trilinear(a, 2)))), [x]),
        ("transform", lambda a: ad.total(ad.log(ad.softplus(ad.transform(a, TransformSpec(1, 2))))
                                         * np.arange(int(np.prod(sq))).reshape(sq)),
         [rng.standard_normal(sq)]),
    ]
    return cases


def _loss_cases(shape, rng):
    t = shape[1] - shape[1] % 2
    hs = (t, 2, 2)
    gt = normalize_histograms(rng.uniform(0, 1, hs) ** 2)
    raw = rng.uniform(0.5, 2, hs)
    cfg = LossConfig()
    return [
        ("kl_supervised", lambda p: kl_supervised(p, gt), [rng.uniform(0.2, 3, hs)]),
        ("intensity_anchor", lambda p: intensity_anchor(p, raw), [rng.uniform(0.2, 3, hs)]),
        ("equivariance_loss", lambda a, b: equivariance_loss(a, b, cfg), [rng.uniform(0.2, 2, hs),
                                                                          rng.uniform(0.2, 2, hs)]),
    ]


@criterion(2, "gradient checks: ops and losses < 1e-4 on 3 shapes, composed pipeline < 1e-3")
def test_c2_gradients(record_property):
    rng = np.random.default_rng(7)
    worst, names = 0.0, set()
    for shape in _SHAPES:
        for name, fn, inputs in _op_cases(shape, rng) + _loss_cases(shape, rng):
            idx = [_probe(a, rng) for a in inputs]
            err = ad.gradcheck(fn, inputs, indices=idx)
            assert err < 1e-4, f"{name} on {shape}: {err:.2e}"
            worst = max(worst, err)
            names.add(name)
    # pukl_mc through the network (its inputs are the parameters)
    for lr in [(2, 2, 2), (4, 2, 2), (2, 4, 4)]:
        net = ReconstructionNet(NetConfig(channels=3, feature_layers=1, init_seed=11))
        y = rng.uniform(0.2, 2, lr)
        err = param_gradcheck(net, lambda: pukl_mc(net, y, LossConfig(gamma=0.05), Rng(4)), rng)
        assert err < 1e-4, f"pukl_mc on {lr}: {err:.2e}"
        worst = max(worst, err)
    names.add("pukl_mc")
    # composed pipeline: L_PUKL + alpha L_E through the full network
    composed = 0.0
    for lr, skip in [((2, 2, 2), "trilinear"), ((4, 2, 2), "identity"), ((2, 4, 4), "none")]:
        net = ReconstructionNet(NetConfig(channels=3, feature_layers=2, skip=skip, init_seed=12))
        y = rng.uniform(0.2, 2, lr)
        cfg = LossConfig(gamma=0.05)
        g = random_transform(Rng(2), 2 * lr[0], 2)

        def loss():
            h1 = net(y)
            _, _, le = equivariance_branch(net, h1, g, cfg, Rng(3), (2, 2, 2))
            return pukl_mc(net, y, cfg, Rng(4), h1_hr=h1) + le * cfg.alpha

        composed = max(composed, param_gradcheck(net, loss, rng))
    record_property("ops", len(names))
    record_property("max_op_err", f"{worst:.1e}")
    record_property("composed_err", f"{composed:.1e}")
    assert composed < 1e-3


# ---------------------------------------------------------------- 3


class _NearestUpsampler:
    scale = (2, 2, 2)

    def __call__(self, x):
        return ad.Tensor(upsample_nearest(np.asarray(x), 2))


@criterion(3, "equivariance zero case: L_E < 1e-9")
def test_c3_equivariance_zero(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(20):
        hr = upsample_nearest(rng.uniform(0.1, 5, (8, 6, 6)), 2)
        g = random_transform(Rng(k), 16, 2)
        _, _, le = equivariance_branch(_NearestUpsampler(), ad.Tensor(hr), g, LossConfig(), None, (2, 2, 2),
                                       add_noise=False)
        worst = max(worst, abs(le.item()))
    record_property("max_L_E", f"{worst:.1e}")
    assert worst < 1e-9


# ---------------------------------------------------------------- 4

DESK = ROOT / "configs" / "desk.json"
C4_MODES = {"PUKL-E": "pukl_e", "PUKL": "pukl_only", "Sup": "sup"}


@pytest.mark.slow
@criterion(4, "desk run: PUKL-E < PUKL < Trilinear, PUKL-E <= 0.7 Trilinear, PUKL-E <= 1.3 Sup, < 20 min")
def test_c4_desk_ordering(tmp_path, record_property):
    cfg = json.loads(DESK.read_text())
    assert cfg["lr_dims"] == [32, 16, 16] and cfg["hr_dims"] == [64, 32, 32]
    assert cfg["sizes"]["train"] == 50 and cfg["sbr"] == 1.0 and cfg["gamma"] == 0.005 and cfg["epochs"] == 20
    t0 = time.perf_counter()
    data = tmp_path / "data"
    common = ["--config", str(DESK), "--threads", "1"]
    assert main(["simulate", *common, "--out", str(data)]) == 0
    models = ["--model", "trilinear"]
    for name, mode in C4_MODES.items():
        run = tmp_path / mode
        assert main(["train", *common, "--data", str(data), "--out", str(run), "--mode", mode]) == 0
        models += ["--model", f"{name}={run / 'best.spnn'}"]
    assert main(["eval", *common, "--data", str(data), "--out", str(tmp_path / "eval"), "--no-export", *models]) == 0
    elapsed = time.perf_counter() - t0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    m = {r["model"]: r["mean_rmse"] for r in report["rows"]}
    for k, v in m.items():
        record_property(k, f"{v:.3f}")
    record_property("minutes", f"{elapsed / 60:.1f}")
    tri, e, p, sup = m["Trilinear"], m["PUKL-E"], m["PUKL"], m["Sup"]
    failures = [what for what, ok in [
        ("PUKL-E < PUKL", e < p),
        ("PUKL < Trilinear", p < tri),
        ("PUKL-E <= 0.7 Trilinear", e <= 0.7 * tri),
        ("PUKL-E <= 1.3 Sup", e <= 1.3 * sup),
        ("runtime < 20 min", elapsed < 20 * 60),
    ] if not ok]
    assert not failures, f"{failures}; rmse {m}; {elapsed / 60:.1f} min"


# ---------------------------------------------------------------- 5


@criterion(5, "Poisson measurement: mean within 2% (1e5 draws), variance within 5%")
def test_c5_measurement(record_property):
    gamma = 0.005
    rate = PhotonCountingCube(np.random.default_rng(5).uniform(0.2, 3.0, (4, 4, 4)))
    target = downsample(rate.data, 2)
    root = Rng(55)
    acc = np.zeros_like(target)
    n = 100_000
    for i in range(n):
        acc += measure(rate, 2, gamma, root.spawn(i)).data
    mean_rel = float(np.max(np.abs(acc / n - target) / target))
    x = np.array([0.01, 0.1, 0.5, 2.0])
    draws = gamma * poisson_array(np.repeat(x / gamma, n).reshape(4, n), Rng(56))
    var_rel = float(np.max(np.abs(draws.var(axis=1) - gamma * x) / (gamma * x)))
    record_property("mean_rel", f"{mean_rel:.1e}")
    record_property("var_rel", f"{var_rel:.1e}")
    assert mean_rel < 0.02
    assert var_rel < 0.05


# ---------------------------------------------------------------- 6


@criterion(6, "group and operator laws on 100 random cubes")
def test_c6_group_laws(record_property):
    rng = np.random.default_rng(6)
    worst_mean = 0.0
    for k in range(100):
        T = 2 * int(rng.integers(2, 9))
        S = 2 * int(rng.integers(1, 5))
        x = rng.standard_normal((T, S, S))
        r = TransformSpec(1, 0)
        y = x
        for _ in range(4):
            y = apply_transform(y, r)
        assert y.tobytes() == x.tobytes()
        g = random_transform(Rng(k), T, 2)
        back = apply_transform(apply_transform(x, g), g.inverse(T))
        assert back.tobytes() == x.tobytes()
        shift = TransformSpec(0, g.shift_bins)
        assert apply_transform(apply_transform(x, shift), shift.inverse(T)).tobytes() == x.tobytes()
        lhs = downsample(apply_transform(x, g), 2)
        rhs = apply_transform_lr(downsample(x, 2), g, 2)
        worst_mean = max(worst_mean, float(np.max(np.abs(lhs - rhs))))
    record_property("max_commutation_err", f"{worst_mean:.1e}")
    assert worst_mean <= 1e-12


# ---------------------------------------------------------------- 7


@criterion(7, "depth extraction: softmax sums, uniform soft-argmax, constant-offset RMSE")
def test_c7_depth(record_property):
    rng = np.random.default_rng(7)
    for _ in range(20):
        h = rng.uniform(-30, 30, (int(rng.integers(1, 80)), 5, 5))
        assert np.max(np.abs(softmax_histogram(h).sum(axis=0) - 1)) <= 1e-9
    for T in (1, 2, 3, 17, 64, 256):
        d = soft_argmax_depth(softmax_histogram(np.zeros((T, 3, 3)))).data
        assert np.all(d == (T + 1) / 2)
    from spisr.cube import DepthImage
    for c in (0.25, 1.0, 7.5, 40.0):
        base = rng.integers(1, 60, (16, 16)).astype(float)
        assert rmse(DepthImage(base + c), DepthImage(base)) == c


# ---------------------------------------------------------------- 8


@criterion(8, "SPC1 and SPNN bitwise round-trips; resume-at-k equals straight-through")
def test_c8_serialization(tmp_path, monkeypatch, record_property):
    rng = np.random.default_rng(8)
    for shape in [(1, 1, 1), (3, 2, 2), (16, 8, 8)]:
        arr = rng.standard_normal(shape)
        assert io.parse_cube(io.cube_bytes(arr))[0].tobytes() == arr.tobytes()
        u = rng.integers(0, 2**32, shape, dtype=np.uint64).astype(np.uint32)
        assert io.parse_cube(io.cube_bytes(u, io.DTYPE_U32))[0].tobytes() == u.tobytes()
    net = ReconstructionNet(NetConfig(channels=3, feature_layers=1))
    state = {k: rng.standard_normal(v.shape) for k, v in net.state_dict().items()}
    back = read_spnn(_io.BytesIO(spnn_bytes(state)))
    assert all(back[k].tobytes() == v.tobytes() for k, v in state.items())

    from spisr.forward import generate_scene_dataset, make_pulse
    data = generate_scene_dataset(4, CubeDims(8, 4, 4), 2, 1.0, 0.005, Rng(8), make_pulse(1.0), 20.0)
    mk = lambda: ReconstructionNet(NetConfig(channels=3, feature_layers=1), lr_shape=(4, 2, 2))
    cfg = TrainConfig(epochs=4)
    straight = train(mk(), data, cfg, val_set=data[:1])

    import spisr.trainer as tr
    orig, seen = tr.validation_rmse, []

    def stop_after_two(net_, val_set):
        seen.append(1)
        if len(seen) > 2:
            raise KeyboardInterrupt
        return orig(net_, val_set)

    monkeypatch.setattr(tr, "validation_rmse", stop_after_two)
    with pytest.raises(KeyboardInterrupt):
        train(mk(), data, cfg, val_set=data[:1], out_dir=tmp_path)
    monkeypatch.setattr(tr, "validation_rmse", orig)
    resumed = train(mk(), data, cfg, val_set=data[:1], out_dir=tmp_path, resume=True)
    same = all(resumed.net.state_dict()[k].tobytes() == v.tobytes() for k, v in straight.net.state_dict().items())
    record_property("resume_k", 2)
    assert same


# ---------------------------------------------------------------- 9

_TINY = {"lr_dims": [4, 4, 4], "hr_dims": [8, 8, 8], "sizes": {"train": 4, "val": 2, "test": 2},
         "epochs": 2, "channels": 3, "feature_layers": 1, "pulse_fwhm": 1.0, "depth_range": 8.0,
         "illuminations": 20.0, "seed": 9}


def _pipeline(root: Path, cfg_path: Path) -> dict:
    data, run, ev = root / "data", root / "run", root / "eval"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(run)]) == 0
    assert main(["eval", "--config", str(cfg_path), "--data", str(data), "--out", str(ev),
                 "--model", "trilinear", "--model", f"PUKL-E={run / 'best.spnn'}"]) == 0
    return json.loads((ev / "report.json").read_text())


@criterion(9, "determinism: two simulate -> train -> eval runs give identical reports")
def test_c9_determinism(tmp_path, record_property):
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(_TINY))
    a = _pipeline(tmp_path / "a", cfg_path)
    b = _pipeline(tmp_path / "b", cfg_path)
    record_property("rows", len(a["rows"]))
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    ma = ((tmp_path / "a" / "run" / "metrics.jsonl").read_text().splitlines())
    mb = ((tmp_path / "b" / "run" / "metrics.jsonl").read_text().splitlines())
    strip = lambda lines: [{k: v for k, v in json.loads(l).items() if k != "wall_ms"} for l in lines]
    assert strip(ma) == strip(mb)
