"""K-space unit dipole kernel, FFT forward field model, and TKD inversion.

The kernel follows d(k) = 1/3 - kz^2 / (kx^2 + ky^2 + kz^2) with d = 0 at
the k-space origin and B0 along +z. Frequencies are physical (cycles/mm,
voxel-size aware) in standard FFT ordering, so anisotropic voxels produce
physically correct kernels. The Nyquist bin of an even axis maps to the
negative frequency -N/2, preserving d(k) = d(-k) exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Unit, Volume


@dataclass(frozen=True)
class KernelGrid:
    """FFT-ordered dipole kernel values matched to a volume geometry."""

    values: np.ndarray
    voxel_size: tuple[float, float, float]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


def dipole_kernel(dims, voxel_size=(1.0, 1.0, 1.0)) -> KernelGrid:
    """Unit dipole kernel over the FFT grid of the given geometry."""
    dims = tuple(int(d) for d in dims)
    voxel_size = tuple(float(v) for v in voxel_size)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be 3 positive integers, got {dims}")
    if len(voxel_size) != 3 or min(voxel_size) <= 0:
        raise ValueError(f"voxel sizes must be positive, got {voxel_size}")
    kx = np.fft.fftfreq(dims[0], voxel_size[0]).reshape(-1, 1, 1)
    ky = np.fft.fftfreq(dims[1], voxel_size[1]).reshape(1, -1, 1)
    kz = np.fft.fftfreq(dims[2], voxel_size[2]).reshape(1, 1, -1)
    kz2 = kz * kz
    k2 = kx * kx + ky * ky + kz2
    with np.errstate(invalid="ignore"):
        d = 1.0 / 3.0 - kz2 / k2
    d[0, 0, 0] = 0.0
    return KernelGrid(d, voxel_size)


def forward_field(chi: Volume, kernel: KernelGrid) -> Volume:
    """Field perturbation induced by a susceptibility volume.

    Computed as real(IFFT(FFT(chi) * d)) in 64-bit. The output keeps the
    numeric scale of chi (ppb-equivalent) and is tagged field_normalized.
    """
    if chi.dims != kernel.dims:
        raise ValueError(f"chi dims {chi.dims} != kernel dims {kernel.dims}")
    spectrum = np.fft.fftn(chi.data.astype(np.float64))
    field = np.fft.ifftn(spectrum * kernel.values).real
    return Volume(field, chi.voxel_size, Unit.field_normalized)


def tkd_invert(field: Volume, kernel: KernelGrid, threshold: float = 0.2) -> Volume:
    """Truncated dipole inversion baseline.

    Divides the field spectrum by d(k) where |d| >= threshold; inside the
    truncation band the divisor is sign(d) * threshold (sign(0) taken +1),
    which bounds the inverse while preserving phase.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if field.dims != kernel.dims:
        raise ValueError(f"field dims {field.dims} != kernel dims {kernel.dims}")
    d = kernel.values
    signed_floor = np.where(d >= 0.0, threshold, -threshold)
    denom = np.where(np.abs(d) >= threshold, d, signed_floor)
    spectrum = np.fft.fftn(field.data.astype(np.float64))
    chi = np.fft.ifftn(spectrum / denom).real
    return Volume(chi, field.voxel_size, Unit.ppb)
