"""Octave convolution, noise layer, and assembled network tests."""

import numpy as np
import pytest

from octqsm.engine import Conv3d, l2_loss
from octqsm.gradcheck import check_network
from octqsm.octave import (
    NetworkConfig,
    NonFiniteActivationError,
    OctaveUNet,
    OctConv,
    OctFeature,
    noise_layer,
    split_high,
)


def rng_at(seed):
    return np.random.default_rng(seed)


def zero_all(net):
    for _, p in net.named_params():
        p.data[...] = 0.0


class TestNetworkConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert cfg.width == 32
        assert cfg.alpha == 0.5
        assert cfg.noise_p == 0.2
        assert cfg.snr_list == (40.0, 20.0, 10.0, 5.0)

    @pytest.mark.parametrize("width", [0, 1, 3, 7, -2])
    def test_width_must_be_even_and_at_least_two(self, width):
        with pytest.raises(ValueError):
            NetworkConfig(width=width)

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            NetworkConfig(noise_p=1.5)

    def test_bad_snr(self):
        with pytest.raises(ValueError):
            NetworkConfig(snr_list=(10.0, -1.0))

    def test_round_trip(self):
        cfg = NetworkConfig(width=8, noise_p=0.1, dtype="float64")
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


class TestOctConv:
    def test_degenerate_alpha_matches_plain_conv_bitwise(self):
        """With all channels high-resolution the layer is a plain conv."""
        oc = OctConv(3, 0, 5, 0, rng_at(0), np.float32)
        assert oc.hl is None and oc.lh is None and oc.ll is None
        plain = Conv3d(3, 5, 3, rng_at(1), np.float32)
        plain.weight.data = oc.hh.weight.data.copy()
        plain.bias.data = oc.hh.bias.data.copy()
        x = rng_at(2).standard_normal((2, 3, 8, 8, 8)).astype(np.float32)
        y = oc.forward(OctFeature(x, None))
        assert y.low is None
        assert np.array_equal(y.high, plain.forward(x))

    def test_alpha_out_one_drops_low_paths(self):
        oc = OctConv.from_alphas(4, 4, 0.5, 1.0, rng_at(0))
        assert oc.hl is None and oc.ll is None
        assert oc.hh is not None and oc.lh is not None

    def test_main_kernel_count_matches_plain_conv(self):
        """16 -> 16 channels at half/half split costs exactly what a plain
        3^3 conv does: 4 * (8*8*27) = 16*16*27 = 6912 weights."""
        oc = OctConv.from_alphas(16, 16, 0.5, 0.5, rng_at(0))
        assert oc.main_kernel_weight_count() == 6912
        assert 16 * 16 * 27 == 6912

    def test_split_high_rounding(self):
        assert split_high(0.5, 16) == 8
        assert split_high(1.0, 7) == 7
        assert split_high(0.0, 7) == 0

    def test_zeroed_cross_paths_decouple_branches(self):
        """Zeroing HL and LH makes high depend only on high, low only on
        low, exactly."""
        oc = OctConv(2, 2, 3, 3, rng_at(3), np.float64)
        for layer in (oc.hl, oc.lh, oc.lh_up):
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0
        r = rng_at(4)
        xh, xl = r.standard_normal((1, 2, 8, 8, 8)), r.standard_normal((1, 2, 4, 4, 4))
        base = oc.forward(OctFeature(xh, xl))
        other = oc.forward(OctFeature(xh, r.standard_normal((1, 2, 4, 4, 4))))
        assert np.array_equal(base.high, other.high)
        other = oc.forward(OctFeature(r.standard_normal((1, 2, 8, 8, 8)), xl))
        assert np.array_equal(base.low, other.low)

    def test_low_branch_halves_resolution(self):
        oc = OctConv(2, 2, 2, 2, rng_at(5))
        xh = rng_at(6).standard_normal((1, 2, 8, 8, 8)).astype(np.float32)
        xl = rng_at(7).standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
        y = oc.forward(OctFeature(xh, xl))
        assert y.high.shape == (1, 2, 8, 8, 8)
        assert y.low.shape == (1, 2, 4, 4, 4)

    def test_branch_mismatch_rejected(self):
        oc = OctConv(2, 2, 2, 2, rng_at(8))
        with pytest.raises(ValueError):
            oc.forward(OctFeature(np.zeros((1, 2, 8, 8, 8), np.float32), None))

    def test_feature_dim_relation_enforced(self):
        with pytest.raises(ValueError):
            OctFeature(np.zeros((1, 1, 8, 8, 8)), np.zeros((1, 1, 3, 3, 3)))


class TestNoiseLayer:
    def test_probability_zero_is_identity(self):
        x = rng_at(0).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
        out = noise_layer(x, rng_at(1), 0.0, [10.0])
        assert out is x

    def test_zero_input_is_fixed_point(self):
        x = np.zeros((2, 1, 8, 8, 8), np.float32)
        out = noise_layer(x, rng_at(2), 1.0, [10.0])
        assert np.array_equal(out, x)

    def test_snr_power_ratio(self):
        """At P=1 and SNR=10 the signal-to-added-noise power ratio lands
        near 10 over a large sample."""
        x = rng_at(3).standard_normal((4, 1, 32, 32, 32)).astype(np.float32)
        assert x.size >= 100_000
        out = noise_layer(x, rng_at(4), 1.0, [10.0])
        noise = out.astype(np.float64) - x.astype(np.float64)
        ratio = np.mean(x.astype(np.float64) ** 2) / np.mean(noise**2)
        assert 9.0 <= ratio <= 11.0

    def test_deterministic_given_seed(self):
        x = rng_at(5).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
        a = noise_layer(x, rng_at(6), 1.0, [40.0, 20.0, 10.0, 5.0])
        b = noise_layer(x, rng_at(6), 1.0, [40.0, 20.0, 10.0, 5.0])
        assert np.array_equal(a, b)

    def test_activation_rate_tracks_probability(self):
        x = np.ones((1, 1, 4, 4, 4), np.float32)
        r = rng_at(7)
        hits = sum(noise_layer(x, r, 0.25, [10.0]) is not x for _ in range(2000))
        assert 400 <= hits <= 600

    def test_invalid_probability(self):
        x = np.zeros((1, 1, 2, 2, 2), np.float32)
        with pytest.raises(ValueError):
            noise_layer(x, rng_at(8), 1.2, [10.0])

    def test_empty_snr_list(self):
        x = np.zeros((1, 1, 2, 2, 2), np.float32)
        with pytest.raises(ValueError):
            noise_layer(x, rng_at(9), 0.5, [])


class TestOctaveUNet:
    def test_structural_audit(self):
        net = OctaveUNet(NetworkConfig(width=8), rng_at(0))
        assert net.layer_inventory() == {
            "octconv": 10,
            "max_pool": 2,
            "upsampling_transposed_conv": 2,
            "batch_norm": 12,
            "final_conv": 1,
            "noise": 1,
        }

    def test_param_names_unique(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(1))
        names = [n for n, _ in net.named_params()]
        assert len(names) == len(set(names))

    def test_shape_preserved_for_multiple_of_eight(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(2))
        x = rng_at(3).standard_normal((1, 1, 8, 16, 24)).astype(np.float32)
        assert net.forward(x).shape == x.shape

    def test_indivisible_dims_rejected(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(4))
        with pytest.raises(ValueError, match="divisible"):
            net.forward(np.zeros((1, 1, 50, 50, 50), np.float32))

    def test_zero_weight_network_is_identity(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(5))
        zero_all(net)
        x = rng_at(6).standard_normal((2, 1, 16, 16, 16)).astype(np.float32)
        assert np.array_equal(net.forward(x), x)

    def test_zero_weight_network_scales_linearly(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(7))
        zero_all(net)
        x = rng_at(8).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
        assert np.array_equal(net.forward(2.0 * x), 2.0 * net.forward(x))

    def test_eval_forward_deterministic(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(9))
        x = rng_at(10).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
        assert np.array_equal(net.forward(x), net.forward(x))

    def test_eval_ignores_noise(self):
        net = OctaveUNet(NetworkConfig(width=4, noise_p=1.0), rng_at(11))
        x = rng_at(12).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
        a = net.forward(x, train=False, noise_rng=rng_at(13))
        b = net.forward(x, train=False)
        assert np.array_equal(a, b)

    def test_train_noise_changes_output(self):
        net = OctaveUNet(NetworkConfig(width=4, noise_p=1.0), rng_at(14))
        x = rng_at(15).standard_normal((4, 1, 8, 8, 8)).astype(np.float32)
        noisy = net.forward(x, train=True, noise_rng=rng_at(16))
        clean = net.forward(x, train=True)
        assert not np.array_equal(noisy, clean)

    def test_non_finite_input_rejected(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(17))
        x = np.zeros((1, 1, 8, 8, 8), np.float32)
        x[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            net.forward(x)

    def test_non_finite_activation_reports_stage(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(18))
        net.bn1a.high.gain.data[...] = np.nan
        x = rng_at(19).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
        with pytest.raises(NonFiniteActivationError, match="1a"):
            net.forward(x)

    def test_batch_input_shape_enforced(self):
        net = OctaveUNet(NetworkConfig(width=4), rng_at(20))
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 2, 8, 8, 8), np.float32))
        with pytest.raises(ValueError):
            net.forward(np.zeros((8, 8, 8), np.float32))

    def test_training_step_reduces_loss(self):
        """A few Adam steps on a single batch must fit it better."""
        from octqsm.engine import Adam

        net = OctaveUNet(NetworkConfig(width=4, noise_p=0.0), rng_at(21))
        r = rng_at(22)
        x = r.standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
        t = (x + 0.1 * r.standard_normal(x.shape)).astype(np.float32)
        opt = Adam([p for _, p in net.named_params()], lr=1e-3)
        first = None
        for _ in range(8):
            net.zero_grad()
            loss, g = l2_loss(net.forward(x, train=True), t)
            net.backward(g)
            opt.step()
            first = loss if first is None else first
        net.zero_grad()
        final, _ = l2_loss(net.forward(x, train=True), t)
        assert final < first

    def test_checkpoint_round_trip(self, tmp_path):
        net = OctaveUNet(NetworkConfig(width=4, noise_p=0.1), rng_at(23))
        x = rng_at(24).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
        net.forward(x, train=True)  # move the running stats off their init
        before = net.forward(x)
        path = tmp_path / "net.qckp"
        net.save(path)
        restored = OctaveUNet.load(path)
        assert restored.config == net.config
        assert np.array_equal(restored.forward(x), before)

    def test_checkpoint_rejects_foreign_file(self, tmp_path):
        from octqsm.engine import save_checkpoint

        path = tmp_path / "other.qckp"
        save_checkpoint(path, [("a", np.zeros(3, np.float32))], {"format": "other"})
        with pytest.raises(ValueError, match="octave-unet"):
            OctaveUNet.load(path)


class TestEndToEndGradients:
    def test_full_network_finite_differences(self):
        assert check_network(width=4, dims=8, seed=0, samples=50) < 1e-3
