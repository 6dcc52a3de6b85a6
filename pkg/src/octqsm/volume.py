"""Volumetric data type, padding geometry, and the QVOL on-disk format.

A Volume is an immutable 3D scalar grid indexed as data[x, y, z] with voxel
size metadata in mm. The static field (B0) direction is the +z axis of the
grid by convention; nothing in this package parameterizes orientation.

QVOL v1 layout (all integers little-endian):
    bytes 0-3    magic b"QVOL"
    bytes 4-7    u32 version = 1
    bytes 8-19   three u32 dims (nx, ny, nz)
    bytes 20-31  three f32 voxel sizes (dx, dy, dz) in mm
    byte  32     u8 unit code (0=ppb, 1=field_normalized, 2=unitless)
    byte  33     u8 encoding code (0=f32le)
    bytes 34-35  reserved (zero)
    bytes 36-    nx*ny*nz scalars, f32le, x fastest-varying
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

MAGIC = b"QVOL"
VERSION = 1
HEADER = struct.Struct("<4sI3I3fBBxx")
HEADER_SIZE = HEADER.size  # 36 bytes


class Unit(IntEnum):
    ppb = 0
    field_normalized = 1
    unitless = 2


class VolumeFormatError(ValueError):
    """Raised when a QVOL file violates the format contract."""


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid with voxel size (mm) and unit metadata.

    voxel_size components are quantized to f32 at construction so that a
    write/read round trip reproduces them exactly.
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    unit: Unit = Unit.unitless

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"dims must be >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        arr = arr.copy()
        arr.setflags(write=False)
        vs = tuple(float(np.float32(v)) for v in self.voxel_size)
        if len(vs) != 3 or any(v <= 0 for v in vs):
            raise ValueError(f"voxel_size must be 3 positive values, got {self.voxel_size}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "unit", Unit(self.unit))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, unit: Unit | None = None) -> "Volume":
        """New Volume sharing this one's metadata."""
        return Volume(data, self.voxel_size, self.unit if unit is None else unit)


@dataclass(frozen=True)
class PadRecord:
    """Per-axis (low, high) zero-padding amounts; inverse data for cropping."""

    lo: tuple[int, int, int] = (0, 0, 0)
    hi: tuple[int, int, int] = (0, 0, 0)

    def is_empty(self) -> bool:
        return all(v == 0 for v in self.lo + self.hi)


def write_volume(vol: Volume, path) -> None:
    """Write vol to path in QVOL v1 (payload cast to f32le, x fastest)."""
    nx, ny, nz = vol.dims
    header = HEADER.pack(MAGIC, VERSION, nx, ny, nz, *vol.voxel_size, int(vol.unit), 0)
    payload = np.ascontiguousarray(vol.data.ravel(order="F"), dtype="<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_volume(path) -> Volume:
    """Read a QVOL v1 file; fails loudly on any header/payload mismatch."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than QVOL header")
    magic, version, nx, ny, nz, dx, dy, dz, unit_code, enc_code = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if enc_code != 0:
        raise VolumeFormatError(f"{path}: unsupported encoding code {enc_code}")
    try:
        unit = Unit(unit_code)
    except ValueError:
        raise VolumeFormatError(f"{path}: unknown unit code {unit_code}") from None
    expected = nx * ny * nz * 4
    actual = len(raw) - HEADER_SIZE
    if actual != expected:
        raise VolumeFormatError(
            f"{path}: payload is {actual} bytes, header declares {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape((nx, ny, nz), order="F")
    return Volume(data, (dx, dy, dz), unit)


def pad_to_multiple(vol: Volume, m: int) -> tuple[Volume, PadRecord]:
    """Zero-pad each dim up to the next multiple of m.

    Padding is split as evenly as possible per axis with the extra voxel on
    the high side. m=1 is the identity (empty record).
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    lo, hi = [], []
    for n in vol.dims:
        total = (-n) % m
        lo.append(total // 2)
        hi.append(total - total // 2)
    rec = PadRecord(tuple(lo), tuple(hi))
    if rec.is_empty():
        return vol, rec
    padded = np.pad(vol.data, tuple(zip(rec.lo, rec.hi)))
    return vol.with_data(padded), rec


def crop_with_record(vol: Volume, rec: PadRecord) -> Volume:
    """Exact inverse of pad_to_multiple."""
    if rec.is_empty():
        return vol
    slices = []
    for n, lo, hi in zip(vol.dims, rec.lo, rec.hi):
        if lo < 0 or hi < 0 or lo + hi >= n:
            raise ValueError(f"pad record {rec} inconsistent with dims {vol.dims}")
        slices.append(slice(lo, n - hi))
    return vol.with_data(vol.data[tuple(slices)])
