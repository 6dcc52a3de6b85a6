"""Training loop, learning-rate schedule, and inference drivers.

Training minimizes the batch-mean squared Frobenius loss between network
output and label with Adam, applying the noise layer per mini-batch. All
randomness derives from the run seed: stream 1 feeds the noise layer,
stream (2, epoch) the shuffling, and parameter init takes the constructor
rng. A non-finite loss aborts with diagnostics rather than skipping.

Inference comes in two forms: full-volume (pad to a multiple of 8, one
eval-mode forward, crop back) and patch-then-assemble (sliding patches with
edge origins clamped to the boundary, overlaps averaged uniformly).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import load_pair, read_manifest, shuffle_batches
from .engine import Adam, l2_loss
from .octave import OctaveUNet
from .volume import Unit, Volume, crop_with_record, pad_to_multiple

MANIFEST_NAME = "manifest.tsv"

DEFAULT_SCHEDULE = ((1, 50, 1e-3), (51, 80, 1e-4), (81, 100, 1e-5))


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message carries epoch/batch diagnostics."""


def clip_schedule(schedule, epochs: int):
    """Restrict a (start, end, lr) schedule to [1, epochs]."""
    out = []
    for start, end, lr in schedule:
        if start > epochs:
            break
        out.append((start, min(end, epochs), lr))
    if out:
        out[-1] = (out[-1][0], epochs, out[-1][2])
    return tuple(out)


@dataclass(frozen=True)
class TrainConfig:
    """Run settings; the schedule is a list of (first epoch, last epoch, lr)
    segments that must cover [1, epochs] without gaps or overlap."""

    epochs: int = 100
    batch_size: int = 32
    lr_schedule: tuple[tuple[int, int, float], ...] = DEFAULT_SCHEDULE
    seed: int = 0
    checkpoint_every: int = 0  # additionally save every N epochs; 0 = final only

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not self.lr_schedule:
            raise ValueError("lr_schedule is empty")
        expect = 1
        for start, end, lr in self.lr_schedule:
            if start != expect or end < start:
                raise ValueError(f"schedule segment ({start},{end}) breaks coverage at epoch {expect}")
            if lr <= 0:
                raise ValueError(f"learning rate must be positive, got {lr}")
            expect = end + 1
        if expect != self.epochs + 1:
            raise ValueError(f"schedule covers [1,{expect - 1}], needs [1,{self.epochs}]")

    def lr_at(self, epoch: int) -> float:
        for start, end, lr in self.lr_schedule:
            if start <= epoch <= end:
                return lr
        raise ValueError(f"epoch {epoch} outside schedule")


def default_config() -> TrainConfig:
    """Full-scale preset: 100 epochs, batch 32, staged 1e-3/1e-4/1e-5."""
    return TrainConfig()


def _load_dataset(dataset_dir):
    d = Path(dataset_dir)
    manifest = read_manifest(d / MANIFEST_NAME)
    if manifest.count == 0:
        raise ValueError(f"{d}: dataset is empty")
    inputs, labels = [], []
    for e in manifest.entries:
        field, label = load_pair(d, e)
        inputs.append(field.data)
        labels.append(label.data)
    return manifest, np.stack(inputs), np.stack(labels)


def train(net: OctaveUNet, dataset_dir, config: TrainConfig, out_dir=None):
    """Runs the optimization and returns the per-epoch history as a list of
    (epoch, mean loss, lr). When out_dir is given, writes checkpoint.qckp,
    per-cadence epoch checkpoints, and history.tsv there."""
    manifest, inputs, labels = _load_dataset(dataset_dir)
    if inputs.shape[0] < config.batch_size:
        raise ValueError(
            f"dataset of {inputs.shape[0]} pairs cannot fill a batch of {config.batch_size}")
    dt = net.config.np_dtype
    inputs = inputs[:, None].astype(dt)
    labels = labels[:, None].astype(dt)

    noise_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    opt = Adam([p for _, p in net.named_params()], lr=config.lr_at(1))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    for epoch in range(1, config.epochs + 1):
        opt.lr = config.lr_at(epoch)
        batch_losses = []
        for bi, idx in enumerate(shuffle_batches(inputs.shape[0], config.batch_size,
                                                 config.seed, epoch)):
            x = inputs[idx]
            t = labels[idx]
            net.zero_grad()
            pred = net.forward(x, train=True, noise_rng=noise_rng)
            loss, g = l2_loss(pred, t)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {bi}, lr {opt.lr}")
            net.backward(g)
            opt.step()
            batch_losses.append(loss)
        history.append((epoch, float(np.mean(batch_losses)), opt.lr))
        if out_dir is not None:
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                net.save(out_dir / f"checkpoint_epoch{epoch:04d}.qckp")
            write_history(history, out_dir / "history.tsv")
    if out_dir is not None:
        net.save(out_dir / "checkpoint.qckp")
    return history


def write_history(history, path) -> None:
    lines = ["epoch\tmean_loss\tlr"]
    lines += [f"{epoch}\t{loss:.8e}\t{lr:.3e}" for epoch, loss, lr in history]
    Path(path).write_text("\n".join(lines) + "\n")


def _eval_forward(net: OctaveUNet, data: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(data, net.config.np_dtype)[None, None]
    return net.forward(x, train=False)[0, 0]


def infer_full(net: OctaveUNet, field: Volume) -> Volume:
    """Whole-volume reconstruction: zero-pad every axis to a multiple of 8,
    one eval-mode pass, crop the padding back off."""
    if not np.all(np.isfinite(field.data)):
        raise ValueError("non-finite field input")
    padded, record = pad_to_multiple(field, net.config.divisor)
    out = _eval_forward(net, padded.data)
    out_vol = Volume(out, field.voxel_size, Unit.ppb)
    return crop_with_record(out_vol, record)


def _patch_axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    """Stride origins plus a clamped final origin so coverage is total."""
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


def infer_patches(net: OctaveUNet, field: Volume, patch_size, stride) -> Volume:
    """Patch-then-assemble reconstruction with uniform overlap averaging."""
    if not np.all(np.isfinite(field.data)):
        raise ValueError("non-finite field input")
    if np.isscalar(patch_size):
        patch_size = (int(patch_size),) * 3
    if np.isscalar(stride):
        stride = (int(stride),) * 3
    m = net.config.divisor
    if any(p % m for p in patch_size):
        raise ValueError(f"patch size {tuple(patch_size)} must be divisible by {m}")
    if any(s < 1 for s in stride):
        raise ValueError(f"strides must be >= 1, got {tuple(stride)}")
    dims = field.dims
    if any(p > d for p, d in zip(patch_size, dims)):
        raise ValueError(f"patch {tuple(patch_size)} larger than volume {dims}")

    acc = np.zeros(dims, np.float64)
    cover = np.zeros(dims, np.float64)
    axes = [_patch_axis_origins(d, p, s) for d, p, s in zip(dims, patch_size, stride)]
    for ox in axes[0]:
        for oy in axes[1]:
            for oz in axes[2]:
                sl = (slice(ox, ox + patch_size[0]),
                      slice(oy, oy + patch_size[1]),
                      slice(oz, oz + patch_size[2]))
                acc[sl] += _eval_forward(net, field.data[sl])
                cover[sl] += 1.0
    assert cover.min() >= 1.0
    out = (acc / cover).astype(net.config.np_dtype)
    return Volume(out, field.voxel_size, Unit.ppb)
