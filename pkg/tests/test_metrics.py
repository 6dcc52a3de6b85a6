"""Metric identities, closed forms, and report serialization tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octqsm.metrics import (
    MetricReport,
    compare,
    linear_fit,
    nrmse,
    percentage_error,
    psnr,
    relative_anisotropy,
    roi_stats,
    ssim3d,
)


def vol(seed=0, dims=(12, 12, 12), scale=1.0):
    return scale * np.random.default_rng(seed).normal(size=dims)


class TestPsnr:
    def test_identical_is_infinite(self):
        x = vol(1)
        assert psnr(x, x) == math.inf

    def test_known_value(self):
        """Peak 2, MSE 0.25 -> 10*log10(16)."""
        ref = np.zeros((4, 4, 4))
        ref[0, 0, 0] = 2.0
        x = ref + 0.5
        assert psnr(x, ref) == pytest.approx(10 * math.log10(16.0), rel=1e-12)

    def test_constant_reference_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            psnr(vol(2, dims=(4, 4, 4)), np.ones((4, 4, 4)))

    def test_more_noise_is_worse(self):
        ref = vol(3)
        assert psnr(ref + 0.01, ref) > psnr(ref + 0.1, ref)


class TestNrmse:
    def test_identical_is_zero(self):
        x = vol(4)
        assert nrmse(x, x) == 0.0

    def test_zero_estimate_is_exactly_hundred(self):
        ref = vol(5)
        assert nrmse(np.zeros_like(ref), ref) == 100.0

    def test_constant_offset_closed_form(self):
        ref = vol(6)
        c = 0.37
        expected = 100.0 * c * math.sqrt(ref.size) / np.linalg.norm(ref)
        assert nrmse(ref + c, ref) == pytest.approx(expected, rel=1e-12)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError, match="all-zero"):
            nrmse(vol(7, dims=(4, 4, 4)), np.zeros((4, 4, 4)))

    @given(scale=st.floats(0.01, 100), seed=st.integers(0, 50))
    @settings(max_examples=30, deadline=None)
    def test_scale_covariance(self, scale, seed):
        x, ref = vol(seed), vol(seed + 1)
        assert nrmse(scale * x, scale * ref) == pytest.approx(nrmse(x, ref), rel=1e-9)


class TestSsim:
    def test_self_similarity_is_exactly_one(self):
        x = vol(8, dims=(16, 16, 16))
        assert ssim3d(x, x) == 1.0

    def test_symmetric(self):
        a, b = vol(9), vol(10)
        assert ssim3d(a, b) == ssim3d(b, a)

    def test_bounded_above_by_one(self):
        a, b = vol(11), vol(12)
        assert ssim3d(a, b) < 1.0

    def test_degrades_with_noise(self):
        ref = vol(13, dims=(16, 16, 16))
        assert ssim3d(ref + 0.05 * vol(14, dims=(16, 16, 16)), ref) > ssim3d(
            ref + 0.5 * vol(14, dims=(16, 16, 16)), ref
        )

    def test_joint_constant_inputs(self):
        x = np.full((8, 8, 8), 3.0)
        assert ssim3d(x, x.copy()) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ssim3d(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


class TestRoiStats:
    def test_piecewise_constant_region(self):
        labels = np.zeros((6, 6, 6), np.int32)
        labels[2:4, 2:4, 2:4] = 5
        x = np.where(labels == 5, 350.0, -10.0)
        mean, std = roi_stats(x, labels, 5)
        assert mean == 350.0 and std == 0.0

    def test_single_voxel_region(self):
        labels = np.zeros((4, 4, 4), np.int32)
        labels[1, 2, 3] = 9
        x = vol(15, dims=(4, 4, 4))
        mean, std = roi_stats(x, labels, 9)
        assert mean == x[1, 2, 3] and std == 0.0

    def test_population_std(self):
        labels = np.ones((1, 1, 2), np.int32)
        x = np.array([[[1.0, 3.0]]])
        mean, std = roi_stats(x, labels, 1)
        assert mean == 2.0 and std == 1.0

    def test_empty_region_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            roi_stats(np.zeros((2, 2, 2)), np.zeros((2, 2, 2), np.int32), 3)

    def test_percentage_error_example(self):
        assert percentage_error(217.0, 222.0) == pytest.approx(-2.252, abs=1e-3)

    def test_percentage_error_zero_reference(self):
        with pytest.raises(ValueError):
            percentage_error(1.0, 0.0)


class TestRelativeAnisotropy:
    def test_equal_inputs_zero(self):
        assert relative_anisotropy(7.0, 7.0) == 0.0

    def test_arithmetic_example(self):
        assert relative_anisotropy(150.0, 50.0) == 0.5

    def test_symmetric(self):
        assert relative_anisotropy(3.0, 11.0) == relative_anisotropy(11.0, 3.0)

    def test_zero_sum_rejected(self):
        with pytest.raises(ValueError):
            relative_anisotropy(1.0, -1.0)


class TestLinearFit:
    def test_exact_line(self):
        xs = [1.0, 2.0, 3.0]
        ys = [3.0, 5.0, 7.0]
        slope, intercept, sse = linear_fit(xs, ys)
        assert slope == 2.0 and intercept == 1.0 and sse == 0.0

    def test_constant_ys(self):
        slope, intercept, sse = linear_fit([0.0, 1.0, 2.0], [4.0, 4.0, 4.0])
        assert slope == 0.0 and intercept == 4.0 and sse == 0.0

    def test_scaling_protocol_shape(self):
        xs = [0.3, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
        ys = [97.0 * x + 1.0 for x in xs]
        slope, intercept, sse = linear_fit(xs, ys)
        assert slope == pytest.approx(97.0, rel=1e-12)
        assert sse == pytest.approx(0.0, abs=1e-18)

    def test_degenerate_xs_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            linear_fit([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])

    def test_too_short(self):
        with pytest.raises(ValueError):
            linear_fit([1.0], [2.0])

    def test_least_squares_residual_orthogonality(self):
        rng = np.random.default_rng(16)
        xs = rng.normal(size=20)
        ys = rng.normal(size=20)
        slope, intercept, sse = linear_fit(xs, ys)
        resid = ys - (slope * xs + intercept)
        assert abs(resid.sum()) < 1e-10
        assert abs((resid * xs).sum()) < 1e-10
        assert sse == pytest.approx(float((resid**2).sum()))


class TestReport:
    def test_compare_identical(self):
        x = vol(17)
        report = compare(x, x)
        assert report.nrmse == 0.0 and report.ssim == 1.0 and report.psnr == math.inf

    def test_roi_included_for_labels(self):
        labels = np.zeros((6, 6, 6), np.int32)
        labels[1:3, 1:3, 1:3] = 2
        labels[4:5, 4:5, 4:5] = 7
        x = vol(18, dims=(6, 6, 6))
        report = compare(x, x + 0.1, labels)
        assert set(report.roi) == {2, 7}

    def test_tsv_and_line_agree(self):
        report = MetricReport(psnr=30.0, ssim=0.9, nrmse=12.5, roi={1: (5.0, 1.0)})
        tsv_pairs = [tuple(line.split("\t")) for line in report.to_tsv().strip().splitlines()]
        line_pairs = [tuple(tok.split("=")) for tok in report.to_line().split()]
        assert tsv_pairs == line_pairs
        assert ("nrmse_pct", "12.5") in tsv_pairs

    def test_optional_fields_serialized(self):
        report = MetricReport(psnr=1.0, ssim=0.5, nrmse=2.0, ra=0.25, regression=(97.0, 1.0, 38.0))
        line = report.to_line()
        assert "ra=0.25" in line and "slope=97" in line and "sse=38" in line
