import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from synprune.layers import Network, desknet_spec
from synprune.pruning import apply_prune, make_plan
from synprune.sparse import (MAGIC, PATHS, BcsrLayer, BcsrModel, UnsupportedGeometry, bench, dense_conv,
                             export_bcsr, from_bytes, read_sbcr, sparse_direct_conv, to_bytes, winograd_conv,
                             winograd_kernel, winograd_transform, write_sbcr)
from synprune.tensor import conv2d_reference


def random_layer(rng, K=6, C=5, k=3, stride=1, padding=1, density=0.4, name="conv"):
    kernels = rng.standard_normal((K, C, k, k)).astype(np.float32)
    mask = rng.random((K, C)) < density
    return BcsrLayer.from_dense(kernels, mask, stride, padding, name), kernels * mask[:, :, None, None]


def pruned_net(seed=0, sparsity=0.7, width=4, first_stride=2, hw=12):
    net = Network(desknet_spec(1, 10, width, first_stride), "synaptic", seed=seed, dtype=np.float32)
    rng = np.random.default_rng(seed)
    for name, buf in net.buffers().items():
        if name.endswith("running_mean"):
            buf[...] = rng.normal(0, 0.2, buf.shape)
        elif name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 2.0, buf.shape)
    apply_prune(net, make_plan(net, sparsity, "synaptic"), (hw, hw))
    return net


class TestBcsrLayer:
    def test_round_trip(self, rng):
        layer, masked = random_layer(rng)
        np.testing.assert_array_equal(layer.to_dense(), masked)
        assert layer.nnz_blocks == int((np.abs(masked).sum(axis=(2, 3)) > 0).sum())

    def test_mask_and_density(self, rng):
        kernels = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        mask = np.array([[1, 0, 1], [0, 0, 0], [1, 1, 1], [0, 1, 0]], bool)
        layer = BcsrLayer.from_dense(kernels, mask)
        np.testing.assert_array_equal(layer.mask(), mask)
        np.testing.assert_array_equal(layer.row_ptr, [0, 2, 2, 5, 6])
        np.testing.assert_array_equal(layer.col_idx, [0, 2, 0, 1, 2, 1])
        assert layer.density == pytest.approx(6 / 12)

    def test_zero_valued_kernel_kept_when_unmasked(self):
        # storage follows the mask, not the values
        layer = BcsrLayer.from_dense(np.zeros((2, 2, 3, 3), np.float32))
        assert layer.nnz_blocks == 4

    @pytest.mark.parametrize("mutate, msg", [
        (lambda l: setattr(l, "row_ptr", l.row_ptr[:-1]), "K\\+1"),
        (lambda l: l.row_ptr.__setitem__(0, 1), "K\\+1"),
        (lambda l: setattr(l, "col_idx", l.col_idx[::-1].copy()), "strictly increasing"),
        (lambda l: l.col_idx.__setitem__(-1, 99), "out of range"),
        (lambda l: l.blocks.__setitem__((0, 0, 0), np.nan), "non-finite"),
    ])
    def test_validate_rejects(self, mutate, msg):
        layer = BcsrLayer.from_dense(np.ones((2, 4, 3, 3), np.float32), np.array([[1, 1, 0, 1], [0, 0, 1, 1]]))
        mutate(layer)
        with pytest.raises(ValueError, match=msg):
            layer.validate()

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="disagree"):
            BcsrLayer("c", 1, 2, 3, 3, 1, 1, [0, 2], [0, 1], np.zeros((1, 3, 3)))

    def test_decreasing_row_ptr_rejected(self):
        with pytest.raises(ValueError, match="nondecreasing"):
            BcsrLayer("c", 2, 2, 1, 1, 1, 0, [0, 2, 1], [0], np.zeros((1, 1, 1)))


class TestConvolutionPaths:
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("hw", [5, 8, 11])
    def test_all_paths_match_reference(self, rng, stride, hw):
        layer, masked = random_layer(rng, stride=stride)
        x = rng.standard_normal((3, layer.C, hw, hw)).astype(np.float32)
        want = conv2d_reference(x.astype(np.float64), masked.astype(np.float64), stride, 1)
        for got in (dense_conv(layer, x), sparse_direct_conv(layer, x),
                    winograd_conv(winograd_transform(layer), x)):
            np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-4)

    def test_zero_padding_winograd(self, rng):
        layer, masked = random_layer(rng, padding=0)
        x = rng.standard_normal((2, layer.C, 9, 7)).astype(np.float32)
        want = conv2d_reference(x.astype(np.float64), masked.astype(np.float64), 1, 0)
        np.testing.assert_allclose(winograd_conv(winograd_transform(layer), x), want, atol=1e-4)

    def test_1x1_kernels_direct(self, rng):
        layer, masked = random_layer(rng, k=1, padding=0, stride=2)
        x = rng.standard_normal((2, layer.C, 6, 6)).astype(np.float32)
        want = conv2d_reference(x.astype(np.float64), masked.astype(np.float64), 2, 0)
        np.testing.assert_allclose(sparse_direct_conv(layer, x), want, atol=1e-5)

    def test_winograd_kernel_transform(self):
        # G g G^T for the identity-centre kernel has a known closed form
        g = np.zeros((3, 3))
        g[1, 1] = 1.0
        u = winograd_kernel(g)
        np.testing.assert_allclose(u, np.outer([0, 0.5, -0.5, 0], [0, 0.5, -0.5, 0]))

    def test_winograd_keeps_block_structure(self, rng):
        layer, _ = random_layer(rng, K=8, C=7, density=0.3)
        wl = winograd_transform(layer)
        assert wl.nnz_blocks == layer.nnz_blocks
        np.testing.assert_array_equal(wl.row_ptr, layer.row_ptr)
        np.testing.assert_array_equal(wl.col_idx, layer.col_idx)
        assert wl.U.shape == (layer.nnz_blocks, 4, 4)

    @pytest.mark.parametrize("k, stride", [(5, 1), (1, 1), (3, 3)])
    def test_unsupported_geometry(self, rng, k, stride):
        layer, _ = random_layer(rng, k=k, stride=stride)
        with pytest.raises(UnsupportedGeometry):
            winograd_transform(layer)

    def test_model_falls_back_to_direct(self, rng):
        layer, masked = random_layer(rng, k=5, padding=2)
        model = BcsrModel([layer])
        x = rng.standard_normal((1, layer.C, 7, 7)).astype(np.float32)
        assert model.winograd(layer) is None
        np.testing.assert_allclose(model.conv(layer, x, "winograd"), sparse_direct_conv(layer, x))

    @pytest.mark.parametrize("path", PATHS)
    def test_empty_layer_gives_zeros(self, rng, path):
        layer = BcsrLayer.from_dense(np.ones((3, 2, 3, 3), np.float32), np.zeros((3, 2), bool), 2, 1)
        x = rng.standard_normal((2, 2, 7, 7)).astype(np.float32)
        out = BcsrModel([layer]).conv(layer, x, path)
        assert out.shape == (2, 3, 4, 4)
        assert not out.any()

    def test_channel_mismatch(self, rng):
        layer, _ = random_layer(rng)
        with pytest.raises(ValueError):
            sparse_direct_conv(layer, np.zeros((1, layer.C + 1, 6, 6), np.float32))

    def test_unknown_path(self, rng):
        layer, _ = random_layer(rng)
        with pytest.raises(ValueError, match="unknown path"):
            BcsrModel([layer]).conv(layer, np.zeros((1, layer.C, 6, 6), np.float32), "fft")

    @given(K=st.integers(1, 5), C=st.integers(1, 5), hw=st.integers(3, 10), stride=st.sampled_from([1, 2]),
           padding=st.integers(0, 1), density=st.floats(0.0, 1.0), seed=st.integers(0, 2**16))
    def test_paths_agree_property(self, K, C, hw, stride, padding, density, seed):
        rng = np.random.default_rng(seed)
        layer, _ = random_layer(rng, K, C, 3, stride, padding, density)
        x = rng.standard_normal((2, C, hw, hw)).astype(np.float32)
        ref = dense_conv(layer, x)
        np.testing.assert_allclose(sparse_direct_conv(layer, x), ref, atol=1e-4)
        np.testing.assert_allclose(winograd_conv(winograd_transform(layer), x), ref, atol=1e-4)

    @given(mask=hnp.arrays(bool, (4, 3)))
    def test_round_trip_property(self, mask):
        kernels = np.arange(4 * 3 * 9, dtype=np.float32).reshape(4, 3, 3, 3) + 1
        layer = BcsrLayer.from_dense(kernels, mask)
        np.testing.assert_array_equal(layer.mask(), mask)
        np.testing.assert_array_equal(layer.to_dense(), kernels * mask[:, :, None, None])


class TestExportedModel:
    @pytest.fixture
    def net(self):
        return pruned_net()

    def test_matches_network_eval(self, net):
        x = np.random.default_rng(5).standard_normal((4, 1, 12, 12)).astype(np.float32)
        want = net.predict_logits(x)
        model = export_bcsr(net)
        for path in PATHS:
            np.testing.assert_allclose(model.forward(x, path), want, rtol=1e-4, atol=1e-4)

    def test_masks_preserved(self, net):
        model = export_bcsr(net)
        masks = net.masks()
        for layer in model.conv_layers():
            np.testing.assert_array_equal(layer.mask(), masks[layer.name])

    def test_every_conv_has_winograd_form(self, net):
        model = export_bcsr(net)
        for layer in model.conv_layers():
            wl = model.winograd(layer)
            assert wl is not None and wl.nnz_blocks == layer.nnz_blocks

    def test_predict_batches(self, net):
        x = np.random.default_rng(2).standard_normal((7, 1, 12, 12)).astype(np.float32)
        model = export_bcsr(net)
        np.testing.assert_array_equal(model.predict(x, batch_size=3), model.forward(x).argmax(axis=1))


class TestSbcrFormat:
    def test_bytes_round_trip_bit_identical(self):
        model = export_bcsr(pruned_net(seed=1))
        buf = to_bytes(model)
        again = from_bytes(buf)
        assert to_bytes(again) == buf
        x = np.random.default_rng(0).standard_normal((3, 1, 12, 12)).astype(np.float32)
        for path in PATHS:
            np.testing.assert_array_equal(again.forward(x, path), model.forward(x, path))

    def test_file_round_trip(self, tmp_path):
        model = export_bcsr(pruned_net(seed=2))
        write_sbcr(model, tmp_path / "m.sbcr")
        assert (tmp_path / "m.sbcr").read_bytes()[:4] == MAGIC
        assert to_bytes(read_sbcr(tmp_path / "m.sbcr")) == to_bytes(model)

    def test_unknown_section_skipped(self):
        import struct
        model = export_bcsr(pruned_net(seed=3))
        buf = to_bytes(model)
        version, count = struct.unpack("<II", buf[4:12])
        extra = struct.pack("<IQ", 999, 5) + b"hello"
        patched = buf[:4] + struct.pack("<II", version, count + 1) + extra + buf[12:]
        assert to_bytes(from_bytes(patched)) == buf

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="not an SBCR"):
            from_bytes(b"XXXX" + bytes(8))

    def test_bad_version(self):
        import struct
        with pytest.raises(ValueError, match="version"):
            from_bytes(MAGIC + struct.pack("<II", 99, 0))

    def test_truncated(self):
        buf = to_bytes(export_bcsr(pruned_net(seed=4)))
        with pytest.raises(ValueError, match="truncated"):
            from_bytes(buf[:len(buf) // 2])


class TestBench:
    def test_report_shape_and_density(self):
        net = pruned_net(sparsity=0.96, width=8)
        model = export_bcsr(net)
        report = bench(model, (2, 1, 12, 12), repetitions=1)
        rows = list(csv.DictReader(io.StringIO(report.to_csv())))
        layers = [l.name for l in model.conv_layers()]
        assert [r["path"] for r in rows] == [p for p in PATHS for _ in range(len(layers) + 1)]
        assert [r["layer"] for r in rows[:len(layers) + 1]] == layers + ["total"]
        masks = net.masks()
        kept = sum(int(m.sum()) for m in masks.values())
        total = sum(m.size for m in masks.values())
        assert report.density() == pytest.approx(kept / total)
        assert rows[len(layers)]["density"] == f"{100 * kept / total:.1f}%"
        assert all(int(r["median_ns"]) > 0 for r in rows)

    def test_reads_file(self, tmp_path):
        model = export_bcsr(pruned_net())
        write_sbcr(model, tmp_path / "m.sbcr")
        report = bench(tmp_path / "m.sbcr", (1, 1, 12, 12), repetitions=1, paths=("direct",))
        assert {r["path"] for r in report.rows} == {"direct"}
