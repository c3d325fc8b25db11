import numpy as np
import pytest

from synprune.layers import Network, desknet_spec
from synprune.training import (SGD, TrainConfig, finetune, l1_subgradient, load_train_config,
                               objective, parse_key_values, sgd_step, strength_indicators, sweep_lambda, train)

from .conftest import blob_dataset


def fast_cfg(**kw):
    base = dict(lr=0.05, epochs=3, milestones=(), batch_size=16, precision="float64")
    base.update(kw)
    return TrainConfig(**base)


class TestL1Subgradient:
    @pytest.mark.parametrize("s,want", [(3.2, 1.0), (-0.01, -1.0), (0.0, 0.0)])
    def test_values(self, s, want):
        assert l1_subgradient(s) == want


class TestObjective:
    def test_zero_lambda_is_classification_loss(self, small_net, rng):
        x, y = rng.standard_normal((4, 1, 8, 8)), np.array([1, 2, 3, 4])
        loss, parts = objective(small_net, x, y, 0.0)
        assert float(loss.data) == parts["classification"]

    def test_zero_strengths_give_zero_penalty(self, small_net, rng):
        for conv, _ in small_net.conv_layers():
            conv.strength.data[...] = 0
        _, parts = objective(small_net, rng.standard_normal((2, 1, 8, 8)), np.array([0, 1]), 0.1)
        assert parts["reg_term"] == 0.0

    def test_penalty_matches_independent_sum(self, small_spec, rng):
        net = Network(small_spec, "non_fix_gamma", seed=4, dtype=np.float64)
        for _, bn in net.conv_layers():
            if bn is not None:
                bn.scale.data = rng.normal(0, 0.5, bn.channels)
        lam = 0.37
        expected = 0.0
        for conv, bn in net.conv_layers():
            g = np.ones(conv.in_channels) if bn is None else np.exp(bn.scale.data)
            for k in range(conv.out_channels):
                for c in range(conv.in_channels):
                    expected += abs(g[c] * conv.strength.data[k, c])
        x, y = rng.standard_normal((3, 1, 8, 8)), np.array([0, 5, 9])
        loss, parts = objective(net, x, y, lam)
        assert float(loss.data) - parts["classification"] == pytest.approx(lam * expected, abs=1e-6)

    def test_masked_kernels_excluded(self, small_net, rng):
        conv = small_net.conv_layers()[1][0]
        before = objective(small_net, rng.standard_normal((2, 1, 8, 8)), np.array([0, 1]), 1.0)[1]["reg_term"]
        removed = abs(conv.strength.data[0, 0])
        conv.mask[0, 0] = False
        after = objective(small_net, rng.standard_normal((2, 1, 8, 8)), np.array([0, 1]), 1.0)[1]["reg_term"]
        assert before - after == pytest.approx(removed)

    def test_negative_lambda(self, small_net):
        with pytest.raises(ValueError):
            objective(small_net, np.zeros((1, 1, 8, 8)), np.array([0]), -1.0)


class TestSGD:
    def test_zero_gradient_leaves_parameters(self, small_net):
        before = small_net.state_dict()
        opt = SGD(small_net, momentum=0.9, weight_decay=0.0)
        opt.step({p: np.zeros_like(p.data) for p in small_net.parameters()}, lr=0.1)
        for k, v in small_net.state_dict().items():
            np.testing.assert_allclose(v, before[k], atol=1e-15)

    def test_plain_step(self, small_net):
        p = small_net.named_parameters()["fc.bias"]
        before = p.data.copy()
        g = np.linspace(-1, 1, p.data.size)
        SGD(small_net, momentum=0.0, weight_decay=0.0).step({p: g}, lr=0.5)
        np.testing.assert_allclose(p.data, before - 0.5 * g)

    def test_momentum_and_weight_decay(self, small_net):
        p = small_net.named_parameters()["fc.weight"]
        theta = p.data.copy()
        g = np.ones_like(theta)
        opt = SGD(small_net, momentum=0.9, weight_decay=0.01)
        v = np.zeros_like(theta)
        for _ in range(3):
            v = 0.9 * v + (g + 0.01 * theta)
            theta = theta - 0.1 * v
            opt.step({p: g}, lr=0.1)
        np.testing.assert_allclose(p.data, theta, rtol=1e-12)

    def test_strengths_get_l1_not_weight_decay(self, small_net):
        conv = small_net.conv_layers()[1][0]
        s = conv.strength
        s.data[0, 0] = 0.0
        before = s.data.copy()
        opt = SGD(small_net, momentum=0.0, weight_decay=0.5)
        opt.step({s: np.zeros_like(s.data)}, lr=0.1, l1=0.2)
        np.testing.assert_allclose(s.data, before - 0.1 * 0.2 * np.sign(before))
        assert s.data[0, 0] == 0.0
        assert s.name in opt.audit["l1"] and s.name not in opt.audit["weight_decay"]
        opt.step({p: np.zeros_like(p.data) for p in small_net.parameters()}, lr=0.1)
        assert not any(n.endswith("strength") for n in opt.audit["weight_decay"])
        assert "fc.weight" in opt.audit["weight_decay"]

    def test_masked_entries_untouched(self, small_net):
        conv = small_net.conv_layers()[2][0]
        m = {k: v.copy() for k, v in small_net.masks().items()}
        m[conv.name][1, 2] = False
        small_net.set_masks(m)
        grads = {p: np.ones_like(p.data) for p in small_net.parameters()}
        SGD(small_net, 0.9, 1e-4).step(grads, lr=0.1, l1=0.1)
        assert conv.strength.data[1, 2] == 0 and not conv.direction.data[1, 2].any()

    def test_nan_gradient_aborts(self, small_net):
        p = small_net.parameters()[0]
        g = np.zeros_like(p.data)
        g.flat[0] = np.nan
        with pytest.raises(FloatingPointError, match=p.name):
            SGD(small_net).step({p: g}, lr=0.1)

    def test_directions_stay_unit(self, small_net, rng):
        grads = {p: rng.standard_normal(p.data.shape) for p in small_net.parameters()}
        SGD(small_net).step(grads, lr=0.3)
        for conv, _ in small_net.conv_layers():
            n = np.sqrt((conv.direction.data ** 2).sum(axis=(2, 3)))
            np.testing.assert_allclose(n, 1.0)

    def test_sgd_step_follows_schedule(self, small_net):
        cfg = TrainConfig(lr=1.0, milestones=(2, 4), epochs=6, momentum=0.0, weight_decay=0.0)
        p = small_net.named_parameters()["fc.bias"]
        before = p.data.copy()
        sgd_step(small_net, {p: np.ones_like(p.data)}, cfg, epoch=3)
        np.testing.assert_allclose(p.data, before - 0.1)


class TestTrainConfig:
    def test_schedule(self):
        cfg = TrainConfig(lr=0.1, milestones=(30, 45), epochs=60)
        assert [cfg.lr_at(e) for e in (0, 29, 30, 44, 45, 59)] == pytest.approx(
            [0.1, 0.1, 0.01, 0.01, 0.001, 0.001])
        assert cfg.final_lr == pytest.approx(0.001)
        assert cfg.n_finetune_epochs == 12

    @pytest.mark.parametrize("kw", [dict(lam=-1), dict(milestones=(5, 5)), dict(milestones=(3, 2)),
                                    dict(milestones=(60,), epochs=60), dict(precision="float16"),
                                    dict(regularizer="l2"), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_parse_file(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("# comment\nlam = 0.01  # trailing\nmilestones = 3, 6\nfix_gamma = false\n"
                        "epochs=8\nunknown = 1\n", encoding="utf-8")
        cfg = load_train_config(path, {"batch_size": "7"})
        assert (cfg.lam, cfg.milestones, cfg.fix_gamma, cfg.epochs, cfg.batch_size) == (0.01, (3, 6), False, 8, 7)

    def test_parse_rejects_garbage(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_key_values("a = 1\nnonsense\n")


class TestTrain:
    def test_separable_blobs(self):
        data = blob_dataset(n=64, classes=2)
        net = Network(desknet_spec(1, 2, 4), "synaptic", seed=0, dtype=np.float64)
        net, hist = train(net, data, fast_cfg(epochs=20, lr=0.02))
        assert max(r.train_acc for r in hist.records) >= 0.99
        assert len(hist) == 20

    def test_deterministic(self):
        data = blob_dataset(n=48, classes=4)
        states = []
        for _ in range(2):
            net = Network(desknet_spec(1, 4, 4), "synaptic", seed=7)
            net, hist = train(net, data, fast_cfg(precision="float32", lam=1e-3), keep_best=False)
            states.append((net.state_dict(), hist.to_csv()))
        for k in states[0][0]:
            np.testing.assert_array_equal(states[0][0][k], states[1][0][k])
        assert states[0][1] == states[1][1]

    def test_large_lambda_collapses_strengths(self):
        data = blob_dataset(n=64, classes=2)
        net = Network(desknet_spec(1, 2, 4), "synaptic", seed=0, dtype=np.float64)
        s0 = strength_indicators(net)
        net, hist = train(net, data, fast_cfg(epochs=4, lam=1.0, lr=0.05, momentum=0.0), keep_best=False)
        regs = [float(s0.sum())] + [r.reg_term for r in hist.records]
        assert all(b < a for a, b in zip(regs, regs[1:]))
        assert np.mean(strength_indicators(net) < 0.1 * np.median(s0)) > 0.5

    def test_history_csv(self):
        data = blob_dataset(n=32)
        net = Network(desknet_spec(1, 2, 4), "synaptic")
        _, hist = train(net, data, fast_cfg(epochs=2))
        lines = hist.to_csv().split("\r\n")
        assert lines[0] == "epoch,loss,reg_term,train_acc,test_acc,min_strength,median_strength"
        assert len([ln for ln in lines if ln]) == 3

    def test_zero_epochs(self):
        net = Network(desknet_spec(1, 2, 4), "synaptic")
        _, hist = train(net, blob_dataset(n=8), fast_cfg(epochs=0))
        assert len(hist) == 0

    def test_empty_dataset(self):
        data = blob_dataset(n=8).subset(0, None)
        with pytest.raises(ValueError, match="empty"):
            train(Network(desknet_spec(1, 2, 4), "synaptic"), data, fast_cfg())

    def test_group_lasso_on_standard_variant(self):
        data = blob_dataset(n=32)
        net = Network(desknet_spec(1, 2, 4), "standard", dtype=np.float64)
        _, hist = train(net, data, fast_cfg(epochs=2, lam=0.01, regularizer="group_lasso"))
        assert np.isfinite(hist.records[-1].loss)


class TestFinetune:
    def test_masks_stay_zero(self):
        data = blob_dataset(n=32)
        net = Network(desknet_spec(1, 2, 4), "synaptic", dtype=np.float64)
        masks = {k: v.copy() for k, v in net.masks().items()}
        masks["pair.a.conv"][:2] = False
        net, hist = finetune(net, data, fast_cfg(epochs=5, lam=0.5), masks)
        conv = dict((c.name, c) for c, _ in net.conv_layers())["pair.a.conv"]
        assert not conv.strength.data[:2].any()
        assert len(hist) == 1
        assert all(r.reg_term >= 0 for r in hist.records)


class TestLambdaSweep:
    def test_stops_when_accuracy_drops(self):
        data = blob_dataset(n=32)
        spec = desknet_spec(1, 2, 4)
        res = sweep_lambda(spec, data, fast_cfg(epochs=1, lambda_start=1e-4, lambda_factor=10.0,
                                                lambda_max_steps=3), baseline_acc=0.0)
        assert [round(r["lam"], 8) for r in res.rows] == [1e-4, 1e-3, 1e-2]
        assert res.chosen_lam == pytest.approx(1e-2) and res.chosen is not None
        res = sweep_lambda(spec, data, fast_cfg(epochs=1, lambda_start=1e-4), baseline_acc=1.01)
        assert res.chosen is None and len(res.rows) == 1
        assert res.to_csv().startswith("lam,test_acc,reg_term,within_tolerance\r\n")
