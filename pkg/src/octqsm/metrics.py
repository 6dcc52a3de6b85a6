"""Reconstruction quality metrics and the metric report record.

PSNR uses the reference dynamic range as peak. SSIM is the Gaussian-windowed
(sigma 1.5, 11-tap separable support) local statistic with K1=0.01, K2=0.03
and the joint dynamic range of both inputs, so it is symmetric and exactly 1
for identical non-constant inputs. NRMSE is reported in percent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_f64(x, ref):
    x = np.asarray(x, np.float64)
    ref = np.asarray(ref, np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref) -> float:
    """Peak signal-to-noise ratio in dB, peak = max(ref) - min(ref);
    identical inputs give +inf."""
    x, ref = _as_f64(x, ref)
    peak = float(ref.max() - ref.min())
    if peak == 0.0:
        raise ValueError("psnr undefined for a constant reference")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def nrmse(x, ref) -> float:
    """Normalized root mean squared error in percent:
    100 * ||x - ref|| / ||ref||."""
    x, ref = _as_f64(x, ref)
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ValueError("nrmse undefined for an all-zero reference")
    return 100.0 * float(np.linalg.norm(x - ref)) / denom


def _gaussian_taps() -> np.ndarray:
    i = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    w = np.exp(-(i**2) / (2.0 * SSIM_SIGMA**2))
    return w / w.sum()


def _windowed_mean(x: np.ndarray) -> np.ndarray:
    taps = _gaussian_taps()
    for axis in range(x.ndim):
        x = correlate1d(x, taps, axis=axis, mode="reflect")
    return x


def ssim3d(x, ref) -> float:
    """Mean local structural similarity over the volume."""
    x, ref = _as_f64(x, ref)
    lo = min(float(x.min()), float(ref.min()))
    hi = max(float(x.max()), float(ref.max()))
    peak = hi - lo
    if peak == 0.0:
        # Both volumes hold the same single value everywhere.
        return 1.0
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x = _windowed_mean(x)
    mu_y = _windowed_mean(ref)
    var_x = _windowed_mean(x * x) - mu_x * mu_x
    var_y = _windowed_mean(ref * ref) - mu_y * mu_y
    cov = _windowed_mean(x * ref) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def roi_stats(x, labels, region: int) -> tuple[float, float]:
    """Sample mean and standard deviation of x over one labeled region."""
    x = np.asarray(x, np.float64)
    labels = np.asarray(labels)
    if x.shape != labels.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {labels.shape}")
    mask = labels == region
    if not mask.any():
        raise ValueError(f"region {region} is empty")
    vals = x[mask]
    return float(vals.mean()), float(vals.std())


def percentage_error(measured: float, reference: float) -> float:
    """(measured - reference) / reference * 100."""
    if reference == 0:
        raise ValueError("percentage error undefined for zero reference")
    return (measured - reference) / reference * 100.0


def relative_anisotropy(a: float, b: float) -> float:
    """|a - b| / |a + b|."""
    if a + b == 0:
        raise ValueError("relative anisotropy undefined for a + b = 0")
    return abs(a - b) / abs(a + b)


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares line fit; returns (slope, intercept, sse)."""
    xs = np.asarray(xs, np.float64)
    ys = np.asarray(ys, np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("need two equal-length 1-D samples of size >= 2")
    mx = xs.mean()
    sxx = float(((xs - mx) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("xs are degenerate (all equal)")
    my = ys.mean()
    slope = float(((xs - mx) * (ys - my)).sum()) / sxx
    intercept = float(my - slope * mx)
    resid = ys - (slope * xs + intercept)
    return slope, intercept, float((resid**2).sum())


@dataclass
class MetricReport:
    """Bundle of the standard comparison metrics plus optional extras."""

    psnr: float
    ssim: float
    nrmse: float
    roi: dict[int, tuple[float, float]] = field(default_factory=dict)
    ra: float | None = None
    regression: tuple[float, float, float] | None = None

    def rows(self) -> list[tuple[str, str]]:
        fmt = "{:.6g}".format
        out = [("psnr_db", fmt(self.psnr)), ("ssim", fmt(self.ssim)), ("nrmse_pct", fmt(self.nrmse))]
        for region in sorted(self.roi):
            mean, std = self.roi[region]
            out.append((f"roi_{region}_mean", fmt(mean)))
            out.append((f"roi_{region}_std", fmt(std)))
        if self.ra is not None:
            out.append(("ra", fmt(self.ra)))
        if self.regression is not None:
            slope, intercept, sse = self.regression
            out += [("slope", fmt(slope)), ("intercept", fmt(intercept)), ("sse", fmt(sse))]
        return out

    def to_tsv(self) -> str:
        return "\n".join(f"{k}\t{v}" for k, v in self.rows()) + "\n"

    def to_line(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.rows())


def compare(pred, ref, labels=None) -> MetricReport:
    """Standard report: PSNR/SSIM/NRMSE, plus per-region stats when an
    integer label volume is supplied (region 0 treated as background)."""
    roi = {}
    if labels is not None:
        labels = np.asarray(labels)
        for region in np.unique(labels):
            region = int(region)
            if region != 0:
                roi[region] = roi_stats(pred, labels, region)
    return MetricReport(psnr=psnr(pred, ref), ssim=ssim3d(pred, ref), nrmse=nrmse(pred, ref), roi=roi)
