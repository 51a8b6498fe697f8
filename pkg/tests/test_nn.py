import numpy as np
import pytest

from ev2vox import checkpoint as ckp
from ev2vox import nn
from ev2vox.errors import FormatError, ShapeMismatch, ZeroBatchVolume
from gradcheck import check_layer, numeric_grad_full, rel_err

N_GRAD_SEEDS = 20


def loop_conv3d(x, weight, bias, stride, padding):
    """Seven nested loops, the slowest possible convolution."""
    n, cin, d, h, w = x.shape
    cout, _, kd, kh, kw = weight.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    y = np.zeros((n, cout, do, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for dd in range(do):
                for hh in range(ho):
                    for ww in range(wo):
                        acc = 0.0
                        for ci in range(cin):
                            for a in range(kd):
                                for b in range(kh):
                                    for c in range(kw):
                                        acc += (
                                            xp[ni, ci, dd * sd + a, hh * sh + b, ww * sw + c]
                                            * weight[co, ci, a, b, c]
                                        )
                        y[ni, co, dd, hh, ww] = acc + (bias[co] if bias is not None else 0.0)
    return y


class TestLayerSpec:
    def test_conv_dims(self):
        spec = nn.LayerSpec("conv3d", (3, 3, 3), (2, 2, 2), (1, 1, 1))
        assert spec.out_dims((10, 32, 32)) == (5, 16, 16)

    def test_deconv_dims(self):
        spec = nn.LayerSpec("deconv3d", (2, 2, 2), (2, 2, 2), (0, 0, 0))
        assert spec.out_dims((4, 4, 4)) == (8, 8, 8)

    def test_identity_kinds(self):
        for kind in ("norm", "relu", "sigmoid"):
            assert nn.LayerSpec(kind).out_dims((3, 4, 5)) == (3, 4, 5)

    def test_non_positive_dims_rejected(self):
        spec = nn.LayerSpec("conv3d", (5, 5, 5))
        with pytest.raises(ShapeMismatch):
            spec.out_dims((3, 3, 3))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ShapeMismatch):
            nn.LayerSpec("pool9d")


class TestConv3d:
    def test_identity_kernel(self):
        conv = nn.Conv3d(1, 1, 1, name="c", dtype=np.float64)
        conv.weight.value[...] = 1.0
        x = np.random.default_rng(0).normal(size=(2, 1, 3, 4, 5))
        np.testing.assert_allclose(conv.forward(x), x)

    def test_all_ones_sum(self):
        conv = nn.Conv3d(1, 1, 2, name="c", dtype=np.float64)
        conv.weight.value[...] = 1.0
        x = np.ones((1, 1, 2, 2, 2))
        y = conv.forward(x)
        assert y.shape == (1, 1, 1, 1, 1)
        assert y[0, 0, 0, 0, 0] == pytest.approx(8.0)

    @pytest.mark.parametrize("stride,padding", [((1, 1, 1), (0, 0, 0)), ((2, 1, 2), (1, 1, 0)), ((1, 2, 2), (0, 1, 1))])
    def test_matches_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(1, 2, 3, 4, 4))
        conv = nn.Conv3d(2, 3, 2, stride=stride, padding=padding, name="c", dtype=np.float64)
        got = conv.forward(x)
        want = loop_conv3d(x, conv.weight.value, conv.bias.value, stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_zero_grad_out(self):
        conv = nn.Conv3d(2, 3, 2, name="c", dtype=np.float64)
        x = np.random.default_rng(1).normal(size=(1, 2, 3, 4, 4))
        y = conv.forward(x)
        gx = conv.backward(np.zeros_like(y))
        assert not gx.any()
        assert not conv.weight.grad.any()
        assert not conv.bias.grad.any()

    def test_scalar_weight_gradient_is_input(self):
        conv = nn.Conv3d(1, 1, 1, name="c", dtype=np.float64)
        x = np.array([[[[[3.5]]]]])
        conv.forward(x)
        conv.backward(np.ones((1, 1, 1, 1, 1)))
        assert conv.weight.grad[0, 0, 0, 0, 0] == pytest.approx(3.5)

    def test_backward_linearity(self):
        conv = nn.Conv3d(2, 2, 3, padding=1, name="c", dtype=np.float64)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 4, 4, 4))
        g = rng.normal(size=(1, 2, 4, 4, 4))
        conv.forward(x)
        g1 = conv.backward(g)
        g2 = conv.backward(3.0 * g)
        np.testing.assert_allclose(3.0 * g1, g2, rtol=1e-12)

    def test_same_padding_preserves_dims(self):
        conv = nn.Conv3d(1, 1, 3, stride=1, padding=1, name="c", dtype=np.float64)
        x = np.zeros((1, 1, 5, 6, 7))
        assert conv.forward(x).shape == (1, 1, 5, 6, 7)

    def test_channel_mismatch_rejected(self):
        conv = nn.Conv3d(2, 3, 2, name="c")
        with pytest.raises(ShapeMismatch):
            conv.forward(np.zeros((1, 4, 3, 3, 3), dtype=np.float32))

    @pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        conv = nn.Conv3d(2, 3, 2, stride=(2, 1, 2), padding=(1, 0, 1),
                         name="c", seed=seed, dtype=np.float64)
        x = rng.normal(size=(1, 2, 3, 4, 4))
        check_layer(conv, x, rng)

    def test_chunked_matches_unchunked(self, monkeypatch):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 8, 5, 5))
        g = rng.normal(size=(2, 4, 8, 5, 5))

        def run():
            conv = nn.Conv3d(3, 4, 3, padding=1, name="c", seed=3, dtype=np.float64)
            y = conv.forward(x)
            gx = conv.backward(g)
            return y, gx, conv.weight.grad.copy()

        y1, gx1, gw1 = run()
        monkeypatch.setattr(nn, "MAX_PATCH_BYTES", 4096)
        y2, gx2, gw2 = run()
        # different chunk boundaries reorder the float summation, so the
        # comparison is tight-tolerance rather than bitwise
        np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(gx1, gx2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(gw1, gw2, rtol=1e-12, atol=1e-12)


class TestDeconv3d:
    def test_impulse_response_copies_kernel(self):
        dc = nn.Deconv3d(1, 1, 2, stride=2, name="d", dtype=np.float64)
        dc.bias.value[...] = 0.0
        x = np.zeros((1, 1, 2, 2, 2))
        x[0, 0, 1, 0, 1] = 1.0
        y = dc.forward(x)
        assert y.shape == (1, 1, 4, 4, 4)
        np.testing.assert_allclose(y[0, 0, 2:4, 0:2, 2:4], dc.weight.value[0, 0])
        mask = np.ones((4, 4, 4), dtype=bool)
        mask[2:4, 0:2, 2:4] = False
        assert not y[0, 0][mask].any()

    def test_output_dims(self):
        dc = nn.Deconv3d(3, 2, (2, 3, 2), stride=(2, 1, 2), padding=(0, 1, 0), name="d")
        assert dc.spec.out_dims((4, 5, 6)) == (8, 5, 12)

    def test_adjoint_identity_with_conv(self):
        rng = np.random.default_rng(3)
        conv = nn.Conv3d(2, 3, 2, stride=2, name="c", seed=1, dtype=np.float64, bias=False)
        dc = nn.Deconv3d(3, 2, 2, stride=2, name="d", seed=2, dtype=np.float64, bias=False)
        dc.weight.value = conv.weight.value  # shared kernel, layouts coincide
        x = rng.normal(size=(2, 2, 4, 4, 4))
        y = rng.normal(size=(2, 3, 2, 2, 2))
        lhs = float((conv.forward(x) * y).sum())
        rhs = float((x * dc.forward(y)).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_deconv_forward_equals_conv_input_grad(self):
        rng = np.random.default_rng(4)
        dc = nn.Deconv3d(3, 2, (3, 2, 2), stride=(1, 2, 2), padding=(1, 0, 0),
                         name="d", seed=5, dtype=np.float64, bias=False)
        g = rng.normal(size=(1, 3, 4, 3, 3))
        out_dims = dc.spec.out_dims((4, 3, 3))
        want = nn.conv3d_core_input_grad(
            g, dc.weight.value, dc.spec.stride, dc.spec.padding, out_dims
        )
        np.testing.assert_array_equal(dc.forward(g), want)

    @pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(100 + seed)
        dc = nn.Deconv3d(3, 2, 2, stride=(2, 2, 1), padding=(0, 0, 1),
                         name="d", seed=seed, dtype=np.float64)
        x = rng.normal(size=(1, 3, 3, 3, 4))
        check_layer(dc, x, rng)


class TestBatchNorm:
    def test_constant_channel_maps_to_shift(self):
        bn = nn.BatchNorm3d(2, name="n", dtype=np.float64)
        bn.shift.value[...] = [0.7, -0.2]
        x = np.full((2, 2, 3, 3, 3), 5.0)
        y = bn.forward(x)
        np.testing.assert_allclose(y[:, 0], 0.7, atol=1e-9)
        np.testing.assert_allclose(y[:, 1], -0.2, atol=1e-9)

    def test_standardizes_moments(self):
        rng = np.random.default_rng(5)
        bn = nn.BatchNorm3d(3, name="n", dtype=np.float64)
        x = rng.normal(loc=2.0, scale=3.0, size=(4, 3, 5, 5, 5))
        y = bn.forward(x)
        mean = y.mean(axis=(0, 2, 3, 4))
        var = y.var(axis=(0, 2, 3, 4))
        assert np.all(np.abs(mean) < 1e-5)
        assert np.all(np.abs(var - 1.0) < 1e-3)

    def test_eval_mode_uses_running_stats(self):
        rng = np.random.default_rng(6)
        bn = nn.BatchNorm3d(1, name="n", dtype=np.float64)
        for _ in range(200):
            bn.forward(rng.normal(loc=4.0, scale=2.0, size=(2, 1, 4, 4, 4)))
        bn.training = False
        shifted = rng.normal(loc=-10.0, scale=1.0, size=(2, 1, 4, 4, 4))
        y = bn.forward(shifted)
        # standardized against running stats (mean 4, var 4), not batch stats
        assert y.mean() < -5.0
        assert abs(bn.running_mean[0] - 4.0) < 0.3

    def test_zero_volume_rejected(self):
        bn = nn.BatchNorm3d(2, name="n")
        with pytest.raises(ZeroBatchVolume):
            bn.forward(np.zeros((0, 2, 3, 3, 3), dtype=np.float32))

    @pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
    def test_gradcheck_train(self, seed):
        rng = np.random.default_rng(200 + seed)
        bn = nn.BatchNorm3d(3, name="n", dtype=np.float64)
        bn.gain.value[...] = rng.normal(size=3)
        bn.shift.value[...] = rng.normal(size=3)
        x = rng.normal(size=(2, 3, 3, 4, 2))
        check_layer(bn, x, rng)

    def test_gradcheck_eval(self):
        rng = np.random.default_rng(77)
        bn = nn.BatchNorm3d(2, name="n", dtype=np.float64)
        bn.forward(rng.normal(size=(2, 2, 4, 4, 4)))  # populate running stats
        bn.training = False
        x = rng.normal(size=(2, 2, 3, 3, 3))
        check_layer(bn, x, rng)

    def test_identity_norm_passthrough(self):
        layer = nn.make_norm("none", 4, "n")
        x = np.random.default_rng(0).normal(size=(1, 4, 2, 2, 2))
        assert layer.forward(x) is x
        g = np.ones_like(x)
        assert layer.backward(g) is g
        assert layer.parameters() == []


class TestActivations:
    def test_relu_values(self):
        r = nn.ReLU()
        x = np.array([[[[[-1.0, 2.0]]]]])
        np.testing.assert_array_equal(r.forward(x), [[[[[0.0, 2.0]]]]])

    def test_sigmoid_at_zero(self):
        s = nn.Sigmoid()
        assert s.forward(np.zeros((1, 1, 1, 1, 1)))[0, 0, 0, 0, 0] == 0.5

    def test_sigmoid_range(self):
        s = nn.Sigmoid()
        x = np.array([[[[[-800.0, 800.0, 0.3]]]]])
        y = s.forward(x)
        assert np.all(y >= 0.0) and np.all(y <= 1.0)
        assert np.all(np.isfinite(y))

    @pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
    def test_relu_gradcheck(self, seed):
        rng = np.random.default_rng(300 + seed)
        x = rng.normal(size=(1, 2, 3, 4, 4))
        x += 0.2 * np.sign(x)  # keep clear of the kink
        check_layer(nn.ReLU(), x, rng)

    @pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
    def test_sigmoid_gradcheck(self, seed):
        rng = np.random.default_rng(400 + seed)
        x = rng.normal(size=(1, 2, 3, 4, 4))
        check_layer(nn.Sigmoid(), x, rng)


class TestMaxPool:
    def test_matches_window_max_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 6, 7, 5))
        pool = nn.MaxPool3d(3, stride=2, padding=1)
        y = pool.forward(x)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)),
                    constant_values=-np.inf)
        do, ho, wo = y.shape[2:]
        for ni in range(2):
            for ci in range(3):
                for d in range(do):
                    for h in range(ho):
                        for w in range(wo):
                            win = xp[ni, ci, 2 * d : 2 * d + 3, 2 * h : 2 * h + 3, 2 * w : 2 * w + 3]
                            assert y[ni, ci, d, h, w] == win.max()

    def test_backward_routes_to_argmax(self):
        x = np.zeros((1, 1, 2, 2, 2))
        x[0, 0, 1, 0, 1] = 5.0
        pool = nn.MaxPool3d(2)
        y = pool.forward(x)
        gx = pool.backward(np.ones_like(y))
        want = np.zeros_like(x)
        want[0, 0, 1, 0, 1] = 1.0
        np.testing.assert_array_equal(gx, want)

    @pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(500 + seed)
        x = rng.normal(size=(1, 2, 4, 5, 4)) * 3.0
        pool = nn.MaxPool3d(3, stride=2, padding=1)
        check_layer(pool, x, rng)


class TestAdaptiveResize:
    def test_identity_when_dims_match(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 2, 4, 4, 4))
        layer = nn.AdaptiveResize3d((4, 4, 4))
        np.testing.assert_array_equal(layer.forward(x), x)

    def test_downsample_keeps_even_planes(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 1, 4, 1, 1)
        x = np.broadcast_to(x, (1, 1, 4, 2, 2)).copy()
        layer = nn.AdaptiveResize3d((2, 2, 2))
        y = layer.forward(x)
        np.testing.assert_array_equal(y[0, 0, :, 0, 0], [0.0, 2.0])

    def test_upsample_repeats_planes(self):
        x = np.arange(2, dtype=np.float64).reshape(1, 1, 2, 1, 1)
        x = np.broadcast_to(x, (1, 1, 2, 2, 2)).copy()
        layer = nn.AdaptiveResize3d((4, 2, 2))
        y = layer.forward(x)
        np.testing.assert_array_equal(y[0, 0, :, 0, 0], [0.0, 0.0, 1.0, 1.0])

    @pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(600 + seed)
        x = rng.normal(size=(1, 2, 5, 3, 4))
        layer = nn.AdaptiveResize3d((3, 4, 2))
        check_layer(layer, x, rng)


class TestConcatSplit:
    def test_round_trip(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(1, 2, 3, 3, 3))
        b = rng.normal(size=(1, 5, 3, 3, 3))
        cat = nn.concat_channels([a, b])
        assert cat.shape[1] == 7
        ga, gb = nn.split_channels(cat, [2, 5])
        np.testing.assert_array_equal(ga, a)
        np.testing.assert_array_equal(gb, b)

    def test_bad_split_rejected(self):
        with pytest.raises(ShapeMismatch):
            nn.split_channels(np.zeros((1, 4, 1, 1, 1)), [2, 3])


class TestInitialization:
    def test_same_seed_same_weights(self):
        c1 = nn.Conv3d(2, 3, 3, name="stem.conv", seed=11)
        c2 = nn.Conv3d(2, 3, 3, name="stem.conv", seed=11)
        np.testing.assert_array_equal(c1.weight.value, c2.weight.value)

    def test_different_names_differ(self):
        c1 = nn.Conv3d(2, 3, 3, name="a", seed=11)
        c2 = nn.Conv3d(2, 3, 3, name="b", seed=11)
        assert not np.array_equal(c1.weight.value, c2.weight.value)

    def test_different_seeds_differ(self):
        c1 = nn.Conv3d(2, 3, 3, name="a", seed=11)
        c2 = nn.Conv3d(2, 3, 3, name="a", seed=12)
        assert not np.array_equal(c1.weight.value, c2.weight.value)

    def test_kaiming_bound(self):
        conv = nn.Conv3d(4, 8, 3, name="c", seed=0)
        bound = np.sqrt(6.0 / (4 * 27))
        assert np.abs(conv.weight.value).max() <= bound
        assert np.abs(conv.weight.value).max() > 0.5 * bound
        assert not conv.bias.value.any()

    def test_zero_grad(self):
        conv = nn.Conv3d(1, 1, 1, name="c", dtype=np.float64)
        x = np.ones((1, 1, 2, 2, 2))
        conv.forward(x)
        conv.backward(np.ones((1, 1, 2, 2, 2)))
        assert conv.weight.grad.any()
        conv.weight.zero_grad()
        assert not conv.weight.grad.any()


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        entries = {
            "encoder.stem.weight": rng.normal(size=(4, 1, 3, 3, 3)).astype(np.float32),
            "encoder.stem.bias": rng.normal(size=4).astype(np.float32),
            "opt.step": np.array([17.0], dtype=np.float32),
        }
        path = tmp_path / "m.ckp1"
        ckp.save_checkpoint(path, entries)
        loaded = ckp.load_checkpoint(path)
        assert list(loaded.keys()) == list(entries.keys())
        for k in entries:
            assert loaded[k].dtype == np.float32
            np.testing.assert_array_equal(loaded[k], entries[k])
        # bytes stable across writes
        path2 = tmp_path / "m2.ckp1"
        ckp.save_checkpoint(path2, entries)
        assert path.read_bytes() == path2.read_bytes()

    def test_empty_checkpoint(self, tmp_path):
        path = tmp_path / "e.ckp1"
        ckp.save_checkpoint(path, {})
        assert ckp.load_checkpoint(path) == {}

    def test_layout(self, tmp_path):
        path = tmp_path / "l.ckp1"
        ckp.save_checkpoint(path, {"ab": np.array([1.0, 2.0], dtype=np.float32)})
        blob = path.read_bytes()
        assert blob[:8] == b"E2VCKP1\x00"
        assert np.frombuffer(blob, "<u4", 1, offset=8)[0] == 1
        assert np.frombuffer(blob, "<u2", 1, offset=12)[0] == 2
        assert blob[14:16] == b"ab"
        assert blob[16] == 1  # rank
        assert np.frombuffer(blob, "<u4", 1, offset=17)[0] == 2
        np.testing.assert_array_equal(
            np.frombuffer(blob, "<f4", 2, offset=21), [1.0, 2.0]
        )
        assert len(blob) == 29

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckp1"
        path.write_bytes(b"BADMAGIC" + b"\x00" * 8)
        with pytest.raises(FormatError):
            ckp.load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "t.ckp1"
        ckp.save_checkpoint(path, {"x": np.zeros(3, dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            ckp.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "x.ckp1"
        ckp.save_checkpoint(path, {"x": np.zeros(3, dtype=np.float32)})
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(FormatError):
            ckp.load_checkpoint(path)

    def test_scalar_rank_zero(self, tmp_path):
        path = tmp_path / "s.ckp1"
        ckp.save_checkpoint(path, {"s": np.float32(3.25)})
        loaded = ckp.load_checkpoint(path)
        assert loaded["s"].shape == ()
        assert loaded["s"] == np.float32(3.25)
