"""Training-pair construction: cropping plans, per-patch field synthesis,
manifests, and deterministic batch shuffling.

A dataset directory holds paired files input_%06d.qvol / label_%06d.qvol
plus manifest.tsv. The manifest records the cropping plan as commented
key=value header lines (including a parameter hash) and one row per pair:
index, source id, crop origin, and the two file names. Inputs are the
forward-model field of each label patch, computed at patch scale with a
kernel built for the patch dimensions and voxel size.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dipole import dipole_kernel, forward_field
from .phantoms import ShapeConfig, random_shapes
from .volume import Unit, Volume, read_volume, write_volume

MANIFEST_NAME = "manifest.tsv"
_COLUMNS = ("index", "source", "ox", "oy", "oz", "input", "label")


@dataclass(frozen=True)
class CropPlan:
    """Sliding-window cropping with optional extra random crops per source."""

    patch_size: tuple[int, int, int]
    stride: tuple[int, int, int]
    random_extra: int = 0
    seed: int = 0

    def __post_init__(self):
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            raise ValueError(f"patch_size must be three positive ints, got {self.patch_size}")
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise ValueError(f"strides must be >= 1, got {self.stride}")
        if self.random_extra < 0:
            raise ValueError(f"random_extra must be >= 0, got {self.random_extra}")


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    source: str
    origin: tuple[int, int, int]
    input_name: str
    label_name: str


@dataclass(frozen=True)
class DatasetManifest:
    patch_size: tuple[int, int, int]
    stride: tuple[int, int, int]
    random_extra: int
    seed: int
    params_hash: str
    entries: tuple[ManifestEntry, ...]

    @property
    def count(self) -> int:
        return len(self.entries)


def _check_fits(dims, patch) -> None:
    if any(p > d for p, d in zip(patch, dims)):
        raise ValueError(f"patch {tuple(patch)} larger than volume {tuple(dims)}")


def sliding_origins(dims, patch_size, stride) -> list[tuple[int, int, int]]:
    """Row-major crop origins 0, s, 2s, ... while origin + patch <= dim.

    Per-axis count is floor((dim - p) / s) + 1.
    """
    _check_fits(dims, patch_size)
    axes = [range(0, d - p + 1, s) for d, p, s in zip(dims, patch_size, stride)]
    return [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]


def _crop(vol: Volume, origin, patch) -> Volume:
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return vol.with_data(vol.data[sl])


def sliding_crops(vol: Volume, plan: CropPlan) -> list[Volume]:
    """All sliding-window patches of the volume under the plan."""
    return [_crop(vol, o, plan.patch_size) for o in sliding_origins(vol.dims, plan.patch_size, plan.stride)]


def random_origins(dims, patch_size, n: int, seed: int) -> list[tuple[int, int, int]]:
    """n uniform valid origins; one integers draw per axis per crop."""
    _check_fits(dims, patch_size)
    if n < 0:
        raise ValueError(f"crop count must be >= 0, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    out = []
    for _ in range(n):
        out.append(tuple(int(rng.integers(0, d - p + 1)) for d, p in zip(dims, patch_size)))
    return out


def random_crops(vol: Volume, n: int, patch_size, seed: int) -> list[Volume]:
    """n uniformly placed patches, deterministic per seed."""
    return [_crop(vol, o, patch_size) for o in random_origins(vol.dims, patch_size, n, seed)]


def synthetic_labels(count: int, base: ShapeConfig, seed: int):
    """Yields (source_id, label volume) pairs of independently seeded random
    shape phantoms; item i derives its stream from (seed, i)."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    for i in range(count):
        item_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        cfg = dataclasses.replace(base, seed=item_seed)
        yield f"synthetic_{i:06d}", random_shapes(cfg)


def _plan_hash(plan: CropPlan, source_ids) -> str:
    text = "|".join([
        f"patch={plan.patch_size}",
        f"stride={plan.stride}",
        f"random_extra={plan.random_extra}",
        f"seed={plan.seed}",
        "sources=" + ",".join(source_ids),
    ])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_dataset(labels, plan: CropPlan, out_dir) -> DatasetManifest:
    """Crops each label source per the plan, synthesizes the paired field
    input per patch, and writes pairs plus manifest.tsv to out_dir.

    labels is an iterable of (source_id, Volume). The field input of every
    patch is the forward model applied at patch scale, so pairs can be
    re-verified directly from the files. Deterministic given (labels, plan).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    source_ids = []
    kernel = None
    index = 0
    for source_id, vol in labels:
        if "\t" in source_id or "\n" in source_id:
            raise ValueError(f"source id {source_id!r} contains separators")
        source_ids.append(source_id)
        origins = sliding_origins(vol.dims, plan.patch_size, plan.stride)
        if plan.random_extra:
            per_source_seed = int(np.random.SeedSequence(
                [plan.seed, len(source_ids) - 1]).generate_state(1)[0])
            origins += random_origins(vol.dims, plan.patch_size, plan.random_extra, per_source_seed)
        for origin in origins:
            label = _crop(vol, origin, plan.patch_size)
            if kernel is None or kernel.dims != label.dims or kernel.voxel_size != label.voxel_size:
                kernel = dipole_kernel(label.dims, label.voxel_size)
            field = forward_field(label, kernel)
            input_name = f"input_{index:06d}.qvol"
            label_name = f"label_{index:06d}.qvol"
            write_volume(field, out_dir / input_name)
            write_volume(label, out_dir / label_name)
            entries.append(ManifestEntry(index, source_id, origin, input_name, label_name))
            index += 1
    manifest = DatasetManifest(
        patch_size=tuple(plan.patch_size),
        stride=tuple(plan.stride),
        random_extra=plan.random_extra,
        seed=plan.seed,
        params_hash=_plan_hash(plan, source_ids),
        entries=tuple(entries),
    )
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [
        f"# patch_size={','.join(map(str, manifest.patch_size))}",
        f"# stride={','.join(map(str, manifest.stride))}",
        f"# random_extra={manifest.random_extra}",
        f"# seed={manifest.seed}",
        f"# params_hash={manifest.params_hash}",
        f"# count={manifest.count}",
        "\t".join(_COLUMNS),
    ]
    for e in manifest.entries:
        lines.append("\t".join([
            str(e.index), e.source, str(e.origin[0]), str(e.origin[1]), str(e.origin[2]),
            e.input_name, e.label_name,
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    header = {}
    entries = []
    saw_columns = False
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value.strip()
            continue
        cells = line.split("\t")
        if not saw_columns:
            if tuple(cells) != _COLUMNS:
                raise ValueError(f"{path}: unexpected manifest columns {cells}")
            saw_columns = True
            continue
        if len(cells) != len(_COLUMNS):
            raise ValueError(f"{path}: malformed row {line!r}")
        entries.append(ManifestEntry(
            index=int(cells[0]),
            source=cells[1],
            origin=(int(cells[2]), int(cells[3]), int(cells[4])),
            input_name=cells[5],
            label_name=cells[6],
        ))
    try:
        manifest = DatasetManifest(
            patch_size=tuple(int(v) for v in header["patch_size"].split(",")),
            stride=tuple(int(v) for v in header["stride"].split(",")),
            random_extra=int(header["random_extra"]),
            seed=int(header["seed"]),
            params_hash=header["params_hash"],
            entries=tuple(entries),
        )
    except KeyError as missing:
        raise ValueError(f"{path}: manifest header missing {missing}") from None
    if int(header.get("count", manifest.count)) != manifest.count:
        raise ValueError(f"{path}: declared count {header['count']} != {manifest.count} rows")
    return manifest


def load_pair(dataset_dir, entry: ManifestEntry) -> tuple[Volume, Volume]:
    d = Path(dataset_dir)
    return read_volume(d / entry.input_name), read_volume(d / entry.label_name)


def verify_dataset(dataset_dir, rtol: float = 1e-5) -> int:
    """Recomputes every pair's field from its label and checks the stored
    input matches to FFT round-off. Returns the number of pairs checked."""
    d = Path(dataset_dir)
    manifest = read_manifest(d / MANIFEST_NAME)
    kernel = None
    for e in manifest.entries:
        field, label = load_pair(d, e)
        if kernel is None or kernel.dims != label.dims or kernel.voxel_size != label.voxel_size:
            kernel = dipole_kernel(label.dims, label.voxel_size)
        again = forward_field(label, kernel)
        scale = max(float(np.max(np.abs(again.data))), 1e-12)
        if float(np.max(np.abs(again.data - field.data))) > rtol * scale:
            raise ValueError(f"pair {e.index}: stored input does not match recomputed field")
    return manifest.count


def shuffle_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Deterministic epoch shuffling: a permutation drawn from (seed, epoch),
    split into full batches with the final partial batch dropped."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if n_items < 0:
        raise ValueError(f"n_items must be >= 0, got {n_items}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))
    perm = rng.permutation(n_items)
    n_batches = n_items // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]
