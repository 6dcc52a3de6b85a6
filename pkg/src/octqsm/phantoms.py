"""Synthetic susceptibility phantoms: random geometric shapes and Shepp-Logan.

Random-shape volumes provide training labels (spheres, cubes, cuboids with
uniform random susceptibilities on a zero background). The 3D Shepp-Logan
phantom provides a held-out evaluation target with labeled ROIs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import Unit, Volume

# Canonical ten-ellipsoid 3D Shepp-Logan geometry (Shepp-Logan extended to
# 3D; the table used by the classical phantom3d generators). Columns:
# a, b, c (semi-axes), x0, y0, z0 (center), phi, theta, psi (z-x-z Euler
# angles, degrees), all in a [-1, 1] normalized cube. Row 0 is the outer
# envelope; rows 1..9 are interior structures.
SHEPP_LOGAN_ELLIPSOIDS = np.array(
    [
        # a       b      c      x0     y0      z0     phi  theta  psi
        [0.6900, 0.920, 0.810, 0.00, 0.0000, 0.000, 0.0, 0.0, 0.0],
        [0.6624, 0.874, 0.780, 0.00, -0.0184, 0.000, 0.0, 0.0, 0.0],
        [0.1100, 0.310, 0.220, 0.22, 0.0000, 0.000, -18.0, 0.0, 10.0],
        [0.1600, 0.410, 0.280, -0.22, 0.0000, 0.000, 18.0, 0.0, 10.0],
        [0.2100, 0.250, 0.410, 0.00, 0.3500, -0.150, 0.0, 0.0, 0.0],
        [0.0460, 0.046, 0.050, 0.00, 0.1000, 0.250, 0.0, 0.0, 0.0],
        [0.0460, 0.046, 0.050, 0.00, -0.1000, 0.250, 0.0, 0.0, 0.0],
        [0.0460, 0.023, 0.050, -0.08, -0.6050, 0.000, 0.0, 0.0, 0.0],
        [0.0230, 0.023, 0.200, 0.00, -0.6060, 0.000, 0.0, 0.0, 0.0],
        [0.0230, 0.046, 0.200, 0.06, -0.6050, 0.000, 0.0, 0.0, 0.0],
    ]
)

# The six labeled interior structures, as row indices into the table above,
# in table order: the large interior ellipsoid, the two tilted mid-size
# ellipsoids, the upper ellipsoid, and the symmetric pair of small spheres.
# These are the six largest interior structures (ties broken toward the
# symmetric pair). The envelope and the three tiny bottom ellipsoids carry
# zero susceptibility and no label.
SHEPP_LOGAN_LABELED_ROWS = (1, 2, 3, 4, 5, 6)

SHEPP_LOGAN_DEFAULT_VALUES = (-100.0, -250.0, -200.0, -50.0, 150.0, 350.0)


@dataclass(frozen=True)
class ShapeConfig:
    """Parameters for random geometric-shape susceptibility volumes.

    Sizes are in voxels; susceptibilities in ppb. Defaults suit 48^3 label
    patches; shrink the size ranges for smaller grids.
    """

    dims: tuple[int, int, int] = (48, 48, 48)
    shape_count_range: tuple[int, int] = (5, 30)
    kinds: tuple[str, ...] = ("sphere", "cube", "cuboid")
    sphere_radius_range: tuple[float, float] = (3.0, 12.0)
    cuboid_edge_range: tuple[float, float] = (4.0, 20.0)
    chi_range: tuple[float, float] = (-300.0, 300.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"bad dims {self.dims}")
        for lo, hi in (
            self.shape_count_range,
            self.sphere_radius_range,
            self.cuboid_edge_range,
            self.chi_range,
        ):
            if lo > hi:
                raise ValueError(f"empty range ({lo}, {hi})")
        if self.shape_count_range[0] < 0:
            raise ValueError("shape count must be nonnegative")
        if not self.kinds or any(k not in ("sphere", "cube", "cuboid") for k in self.kinds):
            raise ValueError(f"unknown shape kinds in {self.kinds}")
        largest = 0.0
        if "sphere" in self.kinds:
            largest = max(largest, 2.0 * self.sphere_radius_range[1])
        if "cube" in self.kinds or "cuboid" in self.kinds:
            largest = max(largest, self.cuboid_edge_range[1])
        # center clamping needs extent <= dim - 1 on every axis
        if min(self.dims) < largest + 1:
            raise ValueError(f"dims {self.dims} cannot fit largest allowed shape ({largest})")


@dataclass(frozen=True)
class LabeledPhantom:
    """Piecewise-constant phantom with integer region labels.

    Label 0 is background (chi 0); every voxel labeled r has chi exactly
    region_table[r].
    """

    chi: Volume
    labels: np.ndarray
    region_table: dict[int, float] = field(default_factory=dict)


def random_shapes(config: ShapeConfig, rng: np.random.Generator | None = None) -> Volume:
    """Random spheres/cubes/cuboids on a zero background, ppb units.

    Deterministic for a fixed config seed (or a caller-supplied rng). Later
    shapes overwrite earlier ones where they overlap. Draw order per volume:
    shape count, then per shape kind index, susceptibility value, size(s),
    center (x, y, z).
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    nx, ny, nz = config.dims
    chi = np.zeros(config.dims, dtype=np.float64)
    grids = np.ogrid[0:nx, 0:ny, 0:nz]
    cmin, cmax = config.shape_count_range
    count = int(rng.integers(cmin, cmax + 1))
    for _ in range(count):
        kind = config.kinds[int(rng.integers(len(config.kinds)))]
        value = float(rng.uniform(*config.chi_range))
        if kind == "sphere":
            r = float(rng.uniform(*config.sphere_radius_range))
            center = [float(rng.uniform(r, n - 1 - r)) for n in config.dims]
            dist2 = sum((g - c) ** 2 for g, c in zip(grids, center))
            chi[dist2 <= r * r] = value
        else:
            if kind == "cube":
                edges = [float(rng.uniform(*config.cuboid_edge_range))] * 3
            else:
                edges = [float(rng.uniform(*config.cuboid_edge_range)) for _ in range(3)]
            center = [float(rng.uniform(e / 2, n - 1 - e / 2)) for e, n in zip(edges, config.dims)]
            inside = np.ones(config.dims, dtype=bool)
            for g, c, e in zip(grids, center, edges):
                inside &= np.abs(g - c) <= e / 2
            chi[inside] = value
    return Volume(chi, unit=Unit.ppb)


def _euler_matrix(phi: float, theta: float, psi: float) -> np.ndarray:
    """z-x-z Euler rotation (degrees), the classical phantom convention."""
    cph, sph = np.cos(np.radians(phi)), np.sin(np.radians(phi))
    cth, sth = np.cos(np.radians(theta)), np.sin(np.radians(theta))
    cps, sps = np.cos(np.radians(psi)), np.sin(np.radians(psi))
    return np.array(
        [
            [cps * cph - cth * sph * sps, cps * sph + cth * cph * sps, sps * sth],
            [-sps * cph - cth * sph * cps, -sps * sph + cth * cph * cps, cps * sth],
            [sth * sph, -sth * cph, cth],
        ]
    )


def shepp_logan(dims, values=SHEPP_LOGAN_DEFAULT_VALUES, voxel_size=(1.0, 1.0, 1.0)) -> LabeledPhantom:
    """3D Shepp-Logan susceptibility phantom with six labeled structures.

    The grid spans [-1, 1] per axis (anisotropic dims stretch the phantom to
    fill the box). The six values (ppb) are assigned to the labeled rows in
    table order; labels are 1..6 in the same order. Ellipsoids are painted
    in table order, later rows overwriting earlier ones, so the phantom is
    exactly piecewise constant.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 32:
        raise ValueError(f"dims must be >= 32 per axis, got {dims}")
    values = tuple(float(v) for v in values)
    if len(values) != 6:
        raise ValueError(f"exactly six region values required, got {len(values)}")
    # resolvability: smallest labeled structure must span >= 2 voxels
    for row in SHEPP_LOGAN_LABELED_ROWS:
        a, b, c = SHEPP_LOGAN_ELLIPSOIDS[row, :3]
        extent = min(a * dims[0], b * dims[1], c * dims[2])  # full axis, voxels
        if extent < 2.0:
            raise ValueError(
                f"dims {dims} cannot resolve the smallest labeled ellipsoid "
                f"({extent:.2f} voxels across, need >= 2)"
            )
    axes = [np.linspace(-1.0, 1.0, n) for n in dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)  # (nx,ny,nz,3)
    chi = np.zeros(dims, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.int16)
    region_table: dict[int, float] = {}
    label_of_row = {row: i + 1 for i, row in enumerate(SHEPP_LOGAN_LABELED_ROWS)}
    for row in range(SHEPP_LOGAN_ELLIPSOIDS.shape[0]):
        a, b, c, x0, y0, z0, phi, theta, psi = SHEPP_LOGAN_ELLIPSOIDS[row]
        rot = _euler_matrix(phi, theta, psi)
        rel = (grid - np.array([x0, y0, z0])) @ rot.T
        inside = (rel[..., 0] / a) ** 2 + (rel[..., 1] / b) ** 2 + (rel[..., 2] / c) ** 2 <= 1.0
        if row in label_of_row:
            lab = label_of_row[row]
            value = values[lab - 1]
            chi[inside] = value
            labels[inside] = lab
            region_table[lab] = value
        else:
            chi[inside] = 0.0
            labels[inside] = 0
    return LabeledPhantom(Volume(chi, voxel_size, Unit.ppb), labels, region_table)


def scale_chi(vol: Volume, factor: float) -> Volume:
    """Pointwise susceptibility scaling; unit preserved."""
    factor = float(factor)
    if not np.isfinite(factor):
        raise ValueError(f"scale factor must be finite, got {factor}")
    return vol.with_data(vol.data * factor)
