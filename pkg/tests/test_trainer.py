import math

import numpy as np
import pytest

from spisr import autodiff as ad
from spisr.cube import CubeDims, Rng
from spisr.forward import generate_scene_dataset, make_pulse
from spisr.losses import LossConfig
from spisr.network import NetConfig, ReconstructionNet
from spisr.trainer import (AdamState, Mode, TrainConfig, TrainingAborted, adam_step, corrupt, self_supervised_losses,
                           self_supervised_step, supervised_step, train)


@pytest.fixture(scope="module")
def toy():
    return generate_scene_dataset(4, CubeDims(8, 4, 4), 2, 1.0, 0.005, Rng(21), make_pulse(1.0),
                                  illuminations=20.0)


def tiny_net(seed=0):
    return ReconstructionNet(NetConfig(channels=4, feature_layers=1, init_seed=seed), lr_shape=(4, 2, 2))


class TestAdam:
    def test_first_step_sign(self, nprng):
        p = ad.Parameter(nprng.standard_normal(10), "w")
        g = nprng.standard_normal(10)
        p.grad = g
        before = p.value.copy()
        adam_step(AdamState(lr=0.01, weight_decay=0.0), [p])
        np.testing.assert_allclose(p.value - before, -0.01 * np.sign(g), rtol=1e-6)

    def test_zero_grad_no_decay(self, nprng):
        p = ad.Parameter(nprng.standard_normal(5), "w")
        p.grad = np.zeros(5)
        before = p.value.copy()
        adam_step(AdamState(weight_decay=0.0), [p])
        np.testing.assert_array_equal(p.value, before)

    def test_decoupled_decay(self):
        p = ad.Parameter(np.array([2.0]), "w")
        p.grad = np.zeros(1)
        adam_step(AdamState(lr=0.1, weight_decay=0.5), [p])
        assert p.value[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_moments_and_step(self, nprng):
        p = ad.Parameter(nprng.standard_normal((2, 3)), "w")
        s = AdamState()
        for k in range(3):
            p.grad = nprng.standard_normal((2, 3))
            adam_step(s, [p])
            assert s.step == k + 1
        assert s.m["w"].shape == (2, 3) and s.v["w"].shape == (2, 3)

    def test_nan_names_parameter(self):
        p = ad.Parameter(np.zeros(2), "head.bias")
        p.grad = np.array([0.0, np.nan])
        with pytest.raises(TrainingAborted, match="head.bias"):
            adam_step(AdamState(), [p])

    def test_matches_reference_formula(self, nprng):
        # two steps against a hand-rolled update
        v0 = nprng.standard_normal(4)
        g1, g2 = nprng.standard_normal(4), nprng.standard_normal(4)
        p = ad.Parameter(v0, "w")
        s = AdamState(lr=0.01, weight_decay=1e-3)
        theta, m, v = v0.copy(), np.zeros(4), np.zeros(4)
        for t, g in enumerate((g1, g2), start=1):
            p.grad = g
            adam_step(s, [p])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta = theta * (1 - 0.01 * 1e-3) - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.value, theta, rtol=1e-14)


class TestSteps:
    def test_corrupt_mean_preserving(self):
        x = np.full(200_000, 0.7)
        out = corrupt(x, 0.01, Rng(3))
        assert abs(out.mean() - 0.7) < 0.002
        assert np.allclose(out / 0.01, np.round(out / 0.01))

    @pytest.mark.parametrize("mode,has_pukl,has_e", [(Mode.PUKL_ONLY, True, False), (Mode.E_ONLY, False, True),
                                                     (Mode.PUKL_E, True, True)])
    def test_mode_gradients(self, toy, mode, has_pukl, has_e):
        net = tiny_net()
        cfg = TrainConfig(mode=mode)
        pk, le, tot = self_supervised_losses(net, toy[0].lr.data, cfg, Rng(1))
        assert pk.requires_grad == has_pukl and le.requires_grad == has_e
        want = (pk.item() if has_pukl else 0.0) + (le.item() if has_e else 0.0)
        assert tot.item() == pytest.approx(want, rel=1e-12)
        assert math.isfinite(le.item()) and math.isfinite(pk.item())

    def test_supervised_zero_loss_double(self, nprng):
        gt = nprng.uniform(0.1, 2, (4, 2, 2))

        class Exact:
            def __init__(self):
                self.out = ad.Parameter(gt.copy(), "out")

            def __call__(self, y):
                return self.out * 1.0

            def parameters(self):
                return [self.out]

            def zero_grad(self):
                self.out.grad = None

        net = Exact()
        stats = supervised_step(net, [(np.zeros((2, 1, 1)), gt)], TrainConfig(mode=Mode.SUP, weight_decay=0.0),
                                Rng(0), AdamState(weight_decay=0.0))
        assert abs(stats["l_total"]) < 1e-12
        assert np.max(np.abs(net.out.grad)) < 1e-12
        np.testing.assert_allclose(net.out.value, gt, rtol=0, atol=1e-9)

    def test_supervised_batch_mean(self, toy):
        from spisr.trainer import supervised_loss
        cfg = TrainConfig(mode=Mode.SUP)
        net = tiny_net()
        per = [supervised_loss(net, p.lr.data, p.hr_gt.data, cfg).item() for p in toy[:2]]
        stats = supervised_step(net, [(p.lr, p.hr_gt) for p in toy[:2]], cfg, Rng(0), AdamState())
        assert stats["l_total"] == pytest.approx(sum(per) / 2, rel=1e-12)

    def test_supervised_needs_gt(self, toy):
        with pytest.raises(ValueError):
            supervised_step(tiny_net(), [(toy[0].lr, None)], TrainConfig(mode=Mode.SUP), Rng(0), AdamState())

    @pytest.mark.parametrize("mode", [Mode.PUKL_E, Mode.SUP])
    def test_loss_decreases(self, toy, mode):
        net = tiny_net(seed=2)
        cfg = TrainConfig(mode=mode, loss=LossConfig(gamma=0.005))
        state = AdamState(lr=0.01, weight_decay=1e-6)
        root = Rng(17)
        losses = []
        for step in range(50):
            batch = [toy[(2 * step) % 4], toy[(2 * step + 1) % 4]]
            rng = root.spawn(step)
            if mode == Mode.SUP:
                losses.append(supervised_step(net, [(p.lr, p.hr_gt) for p in batch], cfg, rng, state)["l_total"])
            else:
                losses.append(self_supervised_step(net, [p.lr.data for p in batch], cfg, rng, state)["l_total"])
        first, last = np.mean(losses[:4]), np.mean(losses[-4:])
        assert last < 0.9 * first


class TestTrain:
    def test_zero_epochs(self, toy):
        net = tiny_net()
        before = net.state_dict()
        res = train(net, toy, TrainConfig(epochs=0))
        assert res.history == [] and res.best_epoch is None
        for k, v in net.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(tiny_net(), [], TrainConfig(epochs=1))

    def test_sup_requires_gt(self, toy):
        from dataclasses import replace
        bad = [replace(p, hr_gt=None) for p in toy]
        with pytest.raises(ValueError, match="hr_gt"):
            train(tiny_net(), bad, TrainConfig(mode=Mode.SUP, epochs=1))

    def test_history_and_metrics(self, toy, tmp_path):
        res = train(tiny_net(), toy, TrainConfig(epochs=2), val_set=toy[:2], out_dir=tmp_path,
                    metrics_path=tmp_path / "m.jsonl")
        assert [h["epoch"] for h in res.history] == [1, 2]
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == 2
        import json
        assert set(json.loads(lines[0])) == {"epoch", "l_pukl", "l_e", "l_total", "val_rmse", "wall_ms"}
        assert (tmp_path / "last.spnn").exists() and (tmp_path / "best.spnn").exists()

    def test_same_seed_bitwise(self, toy):
        a = train(tiny_net(), toy, TrainConfig(epochs=1)).net.state_dict()
        b = train(tiny_net(), toy, TrainConfig(epochs=1)).net.state_dict()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    @pytest.mark.parametrize("mode", [Mode.PUKL_E, Mode.SUP])
    def test_resume_bitwise(self, toy, tmp_path, monkeypatch, mode):
        cfg = TrainConfig(mode=mode, epochs=3)
        straight = train(tiny_net(), toy, cfg, val_set=toy[:1])

        # interrupt after epoch 1 so last.* holds the epoch-1 state
        import spisr.trainer as tr
        orig, calls = tr.validation_rmse, []

        def interrupting(net_, val_set):
            calls.append(1)
            if len(calls) > 1:
                raise KeyboardInterrupt
            return orig(net_, val_set)

        monkeypatch.setattr(tr, "validation_rmse", interrupting)
        with pytest.raises(KeyboardInterrupt):
            train(tiny_net(), toy, cfg, val_set=toy[:1], out_dir=tmp_path)
        monkeypatch.setattr(tr, "validation_rmse", orig)

        resumed = train(tiny_net(seed=99), toy, cfg, val_set=toy[:1], out_dir=tmp_path, resume=True)
        assert len(resumed.history) == 3
        for k, v in straight.net.state_dict().items():
            assert resumed.net.state_dict()[k].tobytes() == v.tobytes()
        assert resumed.best_epoch == straight.best_epoch
        assert [h["val_rmse"] for h in resumed.history] == [h["val_rmse"] for h in straight.history]

    def test_resume_rejects_other_config(self, toy, tmp_path):
        train(tiny_net(), toy, TrainConfig(epochs=1), out_dir=tmp_path)
        with pytest.raises(ValueError, match="different"):
            train(tiny_net(), toy, TrainConfig(epochs=2, lr=0.5), out_dir=tmp_path, resume=True)

