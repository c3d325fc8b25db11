import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synprune import tensor as T
from synprune.layers import (BatchNorm2d, Conv2d, Network, ReparamConv2d, desknet_spec,
                             equivalence_transform, normalize_kernel, synaptic_strength, validate_spec,
                             variant_flags, variant_name)


def randomize_bn(net, rng, gamma_range=(0.5, 2.0)):
    for m in net.modules():
        if isinstance(m, BatchNorm2d):
            m.shift.data = rng.normal(0, 0.5, m.channels)
            m.running_mean[...] = rng.normal(0, 0.5, m.channels)
            m.running_var[...] = rng.uniform(0.5, 2.0, m.channels)
            if m.scale is not None:
                m.scale.data = rng.uniform(*gamma_range, m.channels)


class TestNormalizeKernel:
    def test_unit_norm_and_reconstruction(self, rng):
        k = rng.standard_normal((3, 3))
        r, unit, was_zero = normalize_kernel(k)
        assert not was_zero
        assert np.linalg.norm(unit) == pytest.approx(1.0)
        np.testing.assert_allclose(r * unit, k)

    def test_zero_kernel(self):
        r, unit, was_zero = normalize_kernel(np.zeros((3, 3)))
        assert (r, was_zero) == (0.0, True)
        assert unit[1, 1] == 1 and unit.sum() == 1

    @given(st.lists(st.floats(-1e3, 1e3), min_size=9, max_size=9), st.floats(1e-3, 1e3))
    def test_direction_is_scale_invariant(self, vals, a):
        k = np.array(vals).reshape(3, 3)
        if np.linalg.norm(k) < 1e-6:
            return
        r1, u1, _ = normalize_kernel(k)
        r2, u2, _ = normalize_kernel(a * k)
        np.testing.assert_allclose(u1, u2, atol=1e-9)
        assert r2 == pytest.approx(a * r1, rel=1e-9)


class TestReparamConv:
    def test_effective_kernel_is_strength_times_direction(self, rng):
        conv = ReparamConv2d(2, 3, rng=rng, dtype=np.float64)
        conv.strength.data = rng.uniform(-2, 2, (3, 2))
        w = conv.effective_kernels().data
        np.testing.assert_allclose(np.sqrt((w ** 2).sum(axis=(2, 3))), np.abs(conv.strength.data))

    def test_mask_zeroes_kernels(self, rng):
        conv = ReparamConv2d(2, 3, rng=rng, dtype=np.float64)
        conv.mask[1, 0] = False
        w = conv.effective_kernels().data
        assert not w[1, 0].any() and w[0, 0].any()

    def test_renormalize(self, rng):
        conv = ReparamConv2d(2, 2, rng=rng, dtype=np.float64)
        conv.direction.data *= 3.0
        conv.renormalize()
        np.testing.assert_allclose(np.sqrt((conv.direction.data ** 2).sum(axis=(2, 3))), 1.0)

    def test_plain_conv_strength_is_norm(self, rng):
        conv = Conv2d(2, 2, rng=rng, dtype=np.float64)
        np.testing.assert_allclose(conv.strength_values(), np.sqrt((conv.weight.data ** 2).sum(axis=(2, 3))))


class TestBatchNormLayer:
    def test_scale_modes(self):
        assert BatchNorm2d(3).parameters()[0].kind == "bn_shift"
        assert len(BatchNorm2d(3).parameters()) == 1
        assert BatchNorm2d(3, "log").scale.kind == "bn_log_gamma"
        np.testing.assert_allclose(BatchNorm2d(3, "log").gamma(), 1.0)
        assert BatchNorm2d(3, "linear").scale.kind == "bn_gamma"
        with pytest.raises(ValueError):
            BatchNorm2d(3, "square")


class TestVariants:
    @pytest.mark.parametrize("flags,name", [((True, True), "synaptic"), ((False, True), "non_fix_gamma"),
                                            ((True, False), "non_kernel_norm"), ((False, False), "standard")])
    def test_round_trip(self, flags, name):
        assert variant_name(*flags) == name
        assert variant_flags(name) == flags

    def test_unknown(self):
        with pytest.raises(ValueError):
            variant_flags("nope")

    @pytest.mark.parametrize("variant,kinds", [
        ("synaptic", {"strength", "direction", "bn_shift", "linear_weight", "linear_bias"}),
        ("non_fix_gamma", {"strength", "direction", "bn_shift", "bn_log_gamma", "linear_weight", "linear_bias"}),
        ("non_kernel_norm", {"weight", "bn_shift", "linear_weight", "linear_bias"}),
        ("standard", {"weight", "bn_shift", "bn_gamma", "linear_weight", "linear_bias"}),
    ])
    def test_parameter_kinds(self, small_spec, variant, kinds):
        net = Network(small_spec, variant)
        assert {p.kind for p in net.parameters()} == kinds


class TestNetwork:
    def test_desknet_shapes(self, small_net, rng):
        out = small_net.forward(rng.standard_normal((3, 1, 12, 12)))
        assert out.shape == (3, 10)

    def test_conv_layers_pair_with_preceding_bn(self, small_net):
        pairs = [(c.name, None if b is None else b.name) for c, b in small_net.conv_layers()]
        assert pairs == [("stem", None), ("unit1.conv", "unit1.bn"), ("pair.a.conv", "pair.a.bn"),
                         ("pair.b.conv", "pair.b.bn"), ("down.conv", "down.bn"), ("unit5.conv", "unit5.bn")]

    def test_validate_rejects_conv_without_bn(self):
        spec = desknet_spec(width=4)
        spec.insert(1, {"op": "conv", "name": "bad", "in": 4, "out": 4, "kernel": 3, "stride": 1, "padding": 1})
        with pytest.raises(ValueError, match="BN"):
            validate_spec(spec)

    def test_validate_rejects_channel_mismatch(self):
        spec = desknet_spec(width=4)
        spec[1]["channels"] = 5
        with pytest.raises(ValueError):
            validate_spec(spec)

    def test_state_dict_round_trip(self, small_spec, rng):
        a = Network(small_spec, "non_fix_gamma", seed=1, dtype=np.float64)
        randomize_bn(a, rng)
        b = Network(small_spec, "non_fix_gamma", seed=2, dtype=np.float64)
        b.load_state_dict(a.state_dict())
        x = rng.standard_normal((2, 1, 8, 8))
        np.testing.assert_array_equal(a.predict_logits(x), b.predict_logits(x))

    def test_state_dict_rejects_unknown_and_missing(self, small_net):
        state = small_net.state_dict()
        with pytest.raises(KeyError):
            small_net.load_state_dict({**state, "ghost": np.zeros(1)})
        state.pop("fc.bias")
        with pytest.raises(KeyError):
            small_net.load_state_dict(state)

    def test_set_masks_zeroes_parameters(self, small_net):
        m = {name: mask.copy() for name, mask in small_net.masks().items()}
        m["unit1.conv"][0, :] = False
        small_net.set_masks(m)
        conv = small_net.conv_layers()[1][0]
        assert not conv.strength.data[0].any()
        assert not conv.direction.data[0].any()

    def test_synaptic_strength_uses_gamma(self, small_spec, rng):
        net = Network(small_spec, "non_fix_gamma", dtype=np.float64)
        conv, bn = net.conv_layers()[1]
        bn.scale.data = rng.normal(size=bn.channels)
        want = np.abs(np.exp(bn.scale.data)[None, :] * conv.strength.data)
        np.testing.assert_allclose(synaptic_strength(conv, bn), want)

    def test_astype(self, small_net):
        net32 = small_net.astype(np.float32)
        assert all(p.dtype == np.float32 for p in net32.parameters())
        assert all(b.dtype == np.float32 for b in net32.buffers().values())
        assert small_net.dtype == np.float64


class TestEquivalenceTransform:
    @pytest.mark.parametrize("seed", range(5))
    def test_outputs_agree(self, small_spec, seed):
        rng = np.random.default_rng(seed)
        src = Network(small_spec, "standard", seed=seed, dtype=np.float64)
        randomize_bn(src, rng)
        tgt = equivalence_transform(src)
        assert tgt.variant == "synaptic"
        x = rng.standard_normal((10, 1, 8, 8))
        np.testing.assert_allclose(tgt.predict_logits(x), src.predict_logits(x), rtol=1e-10, atol=1e-10)

    def test_strengths_carry_gamma(self, small_spec, rng):
        src = Network(small_spec, "standard", dtype=np.float64)
        randomize_bn(src, rng)
        tgt = equivalence_transform(src)
        for (sc, sbn), (tc, tbn) in zip(src.conv_layers(), tgt.conv_layers()):
            np.testing.assert_allclose(synaptic_strength(tc, tbn), synaptic_strength(sc, sbn))

    def test_rejects_non_positive_gamma(self, small_spec, rng):
        src = Network(small_spec, "standard", dtype=np.float64)
        randomize_bn(src, rng)
        src.conv_layers()[2][1].scale.data[0] = -0.5
        with pytest.raises(ValueError, match="positive"):
            equivalence_transform(src)

    def test_rejects_other_variants(self, small_net):
        with pytest.raises(ValueError):
            equivalence_transform(small_net)


class TestGradientFlow:
    def test_every_parameter_gets_gradient(self, small_spec, rng):
        for variant in ("synaptic", "standard"):
            net = Network(small_spec, variant, dtype=np.float64)
            with T.Graph() as g:
                loss = T.softmax_cross_entropy(net.forward(rng.standard_normal((4, 1, 8, 8)), True),
                                               np.array([0, 1, 2, 3]))
            grads = g.backward(loss, net.parameters())
            assert all(np.abs(v).sum() > 0 for v in grads.values())
