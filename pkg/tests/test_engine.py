import numpy as np
import pytest

from octqsm import engine
from octqsm.engine import (
    Adam,
    AvgPool3d,
    BatchNorm3d,
    Conv3d,
    ConvTranspose3d,
    MaxPool3d,
    ReLU,
    add,
    concat_channels,
    l2_loss,
    load_checkpoint,
    save_checkpoint,
    split_channels,
)
from octqsm.gradcheck import check_layers


def conv3d_reference(x, w, b):
    """Independent same-padded cross-correlation via window views."""
    k = w.shape[2]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    out = np.einsum("bidhwxyz,oixyz->bodhw", win, w, optimize=True)
    return out + b.reshape(1, -1, 1, 1, 1)


def convt3d_reference(x, w, b):
    """Naive loop transposed conv, kernel 2 stride 2."""
    B, Ci, D, H, W = x.shape
    Co = w.shape[1]
    out = np.zeros((B, Co, 2 * D, 2 * H, 2 * W), x.dtype)
    for kd in range(2):
        for kh in range(2):
            for kw in range(2):
                for ci in range(Ci):
                    for co in range(Co):
                        out[:, co, kd::2, kh::2, kw::2] += x[:, ci] * w[ci, co, kd, kh, kw]
    return out + b.reshape(1, -1, 1, 1, 1)


class TestConv3d:
    def test_identity_kernel(self):
        conv = Conv3d(1, 1, k=1, dtype=np.float64)
        conv.weight.data[...] = 1.0
        conv.bias.data[...] = 0.0
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 4, 4))
        assert np.array_equal(conv.forward(x), x)

    def test_zero_weights_constant_bias(self):
        conv = Conv3d(2, 3, k=3, dtype=np.float64)
        conv.weight.data[...] = 0.0
        conv.bias.data[:] = [1.0, -2.0, 0.5]
        x = np.random.default_rng(1).standard_normal((2, 2, 4, 4, 4))
        y = conv.forward(x)
        for co, b in enumerate([1.0, -2.0, 0.5]):
            assert np.all(y[:, co] == b)

    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_reference(self, k):
        rng = np.random.default_rng(2)
        conv = Conv3d(3, 4, k=k, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 3, 6, 5, 4))
        got = conv.forward(x)
        ref = conv3d_reference(x, conv.weight.data, conv.bias.data)
        assert got.shape == ref.shape == (2, 4, 6, 5, 4)
        assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)

    def test_float32_path(self):
        rng = np.random.default_rng(3)
        conv = Conv3d(2, 2, k=3, rng=rng, dtype=np.float32)
        x = rng.standard_normal((1, 2, 8, 8, 8)).astype(np.float32)
        got = conv.forward(x)
        assert got.dtype == np.float32
        ref = conv3d_reference(x.astype(np.float64), conv.weight.data.astype(np.float64), conv.bias.data.astype(np.float64))
        assert np.allclose(got, ref, rtol=1e-4, atol=1e-5)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        conv = Conv3d(2, 2, k=3, rng=rng, dtype=np.float32)
        x = rng.standard_normal((1, 2, 8, 8, 8)).astype(np.float32)
        assert np.array_equal(conv.forward(x), conv.forward(x))

    def test_channel_mismatch(self):
        conv = Conv3d(2, 2, k=3)
        with pytest.raises(ValueError):
            conv.forward(np.zeros((1, 3, 4, 4, 4), np.float32))

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            Conv3d(1, 1, k=2)


class TestConvTranspose3d:
    def test_doubles_dims(self):
        ct = ConvTranspose3d(2, 3, dtype=np.float64)
        x = np.zeros((1, 2, 24, 24, 24))
        assert ct.forward(x).shape == (1, 3, 48, 48, 48)

    def test_ones_kernel_constant(self):
        ct = ConvTranspose3d(1, 1, dtype=np.float64)
        ct.weight.data[...] = 1.0
        ct.bias.data[...] = 0.0
        x = np.full((1, 1, 3, 3, 3), 7.5)
        y = ct.forward(x)
        assert np.all(y == 7.5)

    def test_matches_reference(self):
        rng = np.random.default_rng(5)
        ct = ConvTranspose3d(3, 2, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 3, 3, 4, 2))
        got = ct.forward(x)
        ref = convt3d_reference(x, ct.weight.data, ct.bias.data)
        assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)


class TestPools:
    def test_constant_preserved(self):
        x = np.full((1, 2, 4, 4, 4), 3.25)
        assert np.all(AvgPool3d().forward(x) == 3.25)
        assert np.all(MaxPool3d().forward(x) == 3.25)

    def test_block_arithmetic(self):
        x = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
        assert AvgPool3d().forward(x)[0, 0, 0, 0, 0] == 3.5
        assert MaxPool3d().forward(x)[0, 0, 0, 0, 0] == 7.0

    def test_halves_dims(self):
        x = np.zeros((2, 3, 8, 6, 4))
        assert AvgPool3d().forward(x).shape == (2, 3, 4, 3, 2)

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            AvgPool3d().forward(np.zeros((1, 1, 3, 4, 4)))
        with pytest.raises(ValueError):
            MaxPool3d().forward(np.zeros((1, 1, 4, 5, 4)))

    def test_max_backward_routes_to_argmax(self):
        x = np.zeros((1, 1, 2, 2, 2))
        x[0, 0, 1, 0, 1] = 5.0
        mp = MaxPool3d()
        mp.forward(x, train=True)
        g = mp.backward(np.ones((1, 1, 1, 1, 1)))
        assert g[0, 0, 1, 0, 1] == 1.0
        assert g.sum() == 1.0

    def test_max_tie_goes_first_in_scan_order(self):
        x = np.zeros((1, 1, 2, 2, 2))
        mp = MaxPool3d()
        mp.forward(x, train=True)
        g = mp.backward(np.ones((1, 1, 1, 1, 1)))
        assert g[0, 0, 0, 0, 0] == 1.0 and g.sum() == 1.0


class TestBatchNorm:
    def test_train_normalizes(self):
        rng = np.random.default_rng(6)
        bn = BatchNorm3d(3, dtype=np.float64)
        x = rng.standard_normal((4, 3, 4, 4, 4)) * 5 + 2
        y = bn.forward(x, train=True)
        assert np.allclose(y.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-12)
        assert np.allclose(y.var(axis=(0, 2, 3, 4)), 1.0, atol=1e-3)

    def test_eval_identity_with_unit_stats(self):
        bn = BatchNorm3d(2, dtype=np.float64)
        x = np.random.default_rng(7).standard_normal((1, 2, 4, 4, 4))
        y = bn.forward(x, train=False)
        assert np.allclose(y, x, atol=1e-5)

    def test_running_stats_updated(self):
        rng = np.random.default_rng(8)
        bn = BatchNorm3d(1, dtype=np.float64)
        x = rng.standard_normal((8, 1, 4, 4, 4)) + 10.0
        bn.forward(x, train=True)
        assert bn.running_mean[0] == pytest.approx(0.9 * 0 + 0.1 * x.mean(), rel=1e-9)

    def test_single_element_rejected(self):
        bn = BatchNorm3d(1)
        with pytest.raises(ValueError):
            bn.forward(np.zeros((1, 1, 1, 1, 1), np.float32), train=True)


class TestElementwise:
    def test_relu_cases(self):
        r = ReLU()
        assert np.all(r.forward(np.full((1, 1, 2, 2, 2), -3.0)) == 0.0)
        x = np.abs(np.random.default_rng(9).standard_normal((1, 1, 2, 2, 2)))
        assert np.array_equal(r.forward(x), x)

    def test_add_and_zero(self):
        x = np.random.default_rng(10).standard_normal((1, 2, 2, 2, 2))
        assert np.array_equal(add(x, np.zeros_like(x)), x)
        with pytest.raises(ValueError):
            add(x, np.zeros((1, 3, 2, 2, 2)))

    def test_concat_split_inverse(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 2, 2, 2))
        y = rng.standard_normal((2, 2, 2, 2, 2))
        c = concat_channels(x, y)
        a, b = split_channels(c, 3)
        assert np.array_equal(a, x) and np.array_equal(b, y)


class TestLoss:
    def test_zero_on_equal(self):
        x = np.random.default_rng(12).standard_normal((2, 1, 3, 3, 3))
        loss, g = l2_loss(x, x.copy())
        assert loss == 0.0 and np.all(g == 0.0)

    def test_unit_difference_arithmetic(self):
        pred = np.ones((1, 1, 2, 2, 2))
        label = np.zeros((1, 1, 2, 2, 2))
        loss, g = l2_loss(pred, label)
        assert loss == 4.0
        assert np.all(g == 1.0)

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(13)
        pred = rng.standard_normal((4, 1, 2, 2, 2))
        label = rng.standard_normal((4, 1, 2, 2, 2))
        _, g = l2_loss(pred, label)
        assert np.allclose(g, (pred - label) / 4, rtol=0, atol=0)


class TestAdam:
    def test_zero_grad_no_change(self):
        p = engine.Param(np.ones(4))
        opt = Adam([p], lr=0.1)
        opt.step()
        assert np.array_equal(p.data, np.ones(4))

    def test_first_step_is_lr_signed(self):
        p = engine.Param(np.zeros(3))
        p.grad[:] = [1.0, -2.0, 0.5]
        opt = Adam([p], lr=0.01)
        opt.step()
        assert np.allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-6)

    def test_quadratic_descent(self):
        p = engine.Param(np.array([5.0]))
        opt = Adam([p], lr=0.1)
        losses = []
        for _ in range(60):
            opt.zero_grad()
            p.grad[:] = 2 * p.data
            losses.append(float(p.data[0] ** 2))
            opt.step()
        assert all(b <= a for a, b in zip(losses[10:], losses[11:]))
        assert losses[-1] < 0.5 * losses[0]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        named = [("a.weight", rng.standard_normal((2, 3)).astype(np.float32)),
                 ("b.bias", rng.standard_normal(5).astype(np.float32))]
        meta = {"width": 8, "snr_list": [40, 20, 10, 5]}
        path = tmp_path / "net.qckpt"
        save_checkpoint(path, named, meta)
        meta2, arrays = load_checkpoint(path)
        assert meta2 == meta
        for name, arr in named:
            assert np.array_equal(arrays[name], arr)

    def test_deterministic_bytes(self, tmp_path):
        named = [("w", np.arange(6, dtype=np.float32).reshape(2, 3))]
        p1, p2 = tmp_path / "a", tmp_path / "b"
        save_checkpoint(p1, named, {"k": 1})
        save_checkpoint(p2, named, {"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestGradients:
    def test_all_layers_pass_fd(self):
        errs = check_layers(seed=123)
        for name, err in errs.items():
            assert err < 1e-4, f"{name}: rel err {err:.3e}"
