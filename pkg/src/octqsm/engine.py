"""Minimal deterministic differentiable 3D tensor engine.

Explicit forward and backward passes for the fixed layer set the network
needs: 3D convolution (stride 1, "same" padding), transposed convolution
(kernel 2, stride 2), average/max pooling (2x2x2, stride 2), batch norm,
ReLU, add/concat/split, the L2 training loss, and Adam. There is no
autodiff graph; every layer implements its own backward.

Tensors are 5D arrays ordered (batch, channel, depth, height, width). The
convolution loop nests are hand-written and JIT-compiled with numba for
single-core speed; numba contributes no numerical semantics. All layers are
dtype-generic: float32 for training, float64 for finite-difference checks.

Checkpoint format "QCKP v1": magic b"QCKP", u32 version=1, u32 manifest
length, UTF-8 JSON manifest {"meta": {...}, "entries": [{"name", "shape",
"offset"}, ...]}, then the concatenated f32le payloads (C-order, offsets in
bytes from the payload start). Integers little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from numba import njit

# ---------------------------------------------------------------------------
# compiled loop nests


@njit(cache=True, fastmath=True)
def _conv3d_fwd(xp, w, bias, out):
    """Cross-correlation of padded input xp (B,Ci,D+K-1,H+K-1,W+K-1) with
    w (Co,Ci,K,K,K) into out (B,Co,D,H,W)."""
    B, Ci, _, _, _ = xp.shape
    Co = w.shape[0]
    K = w.shape[2]
    _, _, D, H, W = out.shape
    acc = np.empty(W, xp.dtype)
    for b in range(B):
        for co in range(Co):
            bval = bias[co]
            for d in range(D):
                for h in range(H):
                    for x in range(W):
                        acc[x] = bval
                    for ci in range(Ci):
                        for kd in range(K):
                            for kh in range(K):
                                row = xp[b, ci, d + kd, h + kh]
                                for kw in range(K):
                                    wv = w[co, ci, kd, kh, kw]
                                    for x in range(W):
                                        acc[x] += wv * row[x + kw]
                    for x in range(W):
                        out[b, co, d, h, x] = acc[x]


@njit(cache=True, fastmath=True)
def _conv3d_fwd3(xp, w, bias, out):
    """Kernel-3 specialization of _conv3d_fwd with the tap loop unrolled."""
    B, Ci, _, _, _ = xp.shape
    Co = w.shape[0]
    _, _, D, H, W = out.shape
    acc = np.empty(W, xp.dtype)
    for b in range(B):
        for co in range(Co):
            bval = bias[co]
            for d in range(D):
                for h in range(H):
                    for x in range(W):
                        acc[x] = bval
                    for ci in range(Ci):
                        for kd in range(3):
                            for kh in range(3):
                                row = xp[b, ci, d + kd, h + kh]
                                w0 = w[co, ci, kd, kh, 0]
                                w1 = w[co, ci, kd, kh, 1]
                                w2 = w[co, ci, kd, kh, 2]
                                for x in range(W):
                                    acc[x] += w0 * row[x] + w1 * row[x + 1] + w2 * row[x + 2]
                    for x in range(W):
                        out[b, co, d, h, x] = acc[x]


@njit(cache=True, fastmath=True)
def _conv3d_dw3(xp, g, dw):
    """Kernel-3 weight gradient with single-pass row reuse."""
    B, Ci, _, _, _ = xp.shape
    Co = dw.shape[0]
    _, _, D, H, W = g.shape
    zero = xp[0, 0, 0, 0, 0] * 0
    for b in range(B):
        for co in range(Co):
            for ci in range(Ci):
                for d in range(D):
                    for h in range(H):
                        grow = g[b, co, d, h]
                        for kd in range(3):
                            for kh in range(3):
                                xrow = xp[b, ci, d + kd, h + kh]
                                s0 = zero
                                s1 = zero
                                s2 = zero
                                for x in range(W):
                                    v = grow[x]
                                    s0 += v * xrow[x]
                                    s1 += v * xrow[x + 1]
                                    s2 += v * xrow[x + 2]
                                dw[co, ci, kd, kh, 0] += s0
                                dw[co, ci, kd, kh, 1] += s1
                                dw[co, ci, kd, kh, 2] += s2


@njit(cache=True, fastmath=True)
def _conv3d_dw(xp, g, dw):
    """Weight gradient: correlate padded input with the output gradient g
    (B,Co,D,H,W); accumulates into dw (Co,Ci,K,K,K)."""
    B, Ci, _, _, _ = xp.shape
    Co, _, K, _, _ = dw.shape
    _, _, D, H, W = g.shape
    zero = xp[0, 0, 0, 0, 0] * 0
    for co in range(Co):
        for ci in range(Ci):
            for kd in range(K):
                for kh in range(K):
                    for kw in range(K):
                        s = zero
                        for b in range(B):
                            for d in range(D):
                                for h in range(H):
                                    grow = g[b, co, d, h]
                                    xrow = xp[b, ci, d + kd, h + kh]
                                    for x in range(W):
                                        s += grow[x] * xrow[x + kw]
                        dw[co, ci, kd, kh, kw] += s


class Param:
    """A learnable array with its gradient accumulator."""

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    def zero_grad(self):
        self.grad[...] = 0.0


def _init_normal(rng: np.random.Generator, shape, dtype, std=0.01) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv3d:
    """3D cross-correlation, stride 1, "same" zero padding (odd kernels).

    Weights (out_ch, in_ch, k, k, k) and biases are drawn from N(0, 0.01).
    """

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, rng=None, dtype=np.float32):
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd for same-padding, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.pad = (k - 1) // 2
        self.weight = Param(_init_normal(rng, (out_ch, in_ch, k, k, k), dtype))
        self.bias = Param(_init_normal(rng, (out_ch,), dtype))
        self._xp = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 5 or x.shape[1] != self.in_ch:
            raise ValueError(f"expected (B,{self.in_ch},D,H,W) input, got {x.shape}")
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else np.ascontiguousarray(x)
        out = np.empty((x.shape[0], self.out_ch, *x.shape[2:]), x.dtype)
        if self.k == 3:
            _conv3d_fwd3(xp, self.weight.data, self.bias.data, out)
        else:
            _conv3d_fwd(xp, self.weight.data, self.bias.data, out)
        if train:
            self._xp = xp
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        xp = self._xp
        g = np.ascontiguousarray(g)
        if self.k == 3:
            _conv3d_dw3(xp, g, self.weight.grad)
        else:
            _conv3d_dw(xp, g, self.weight.grad)
        self.bias.grad += g.sum(axis=(0, 2, 3, 4))
        # input gradient = same-conv of g with the flipped, in/out-swapped kernel
        w_sf = np.ascontiguousarray(
            self.weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
        )
        p = self.pad
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else g
        dx = np.empty((g.shape[0], self.in_ch, *g.shape[2:]), g.dtype)
        zero_bias = np.zeros(self.in_ch, g.dtype)
        if self.k == 3:
            _conv3d_fwd3(gp, w_sf, zero_bias, dx)
        else:
            _conv3d_fwd(gp, w_sf, zero_bias, dx)
        return dx


class ConvTranspose3d:
    """Transposed convolution, kernel 2, stride 2: doubles spatial dims.

    Weights (in_ch, out_ch, 2, 2, 2); each output voxel is covered by
    exactly one kernel tap, so the op is a channel mix plus interleave.
    """

    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, 2
        self.weight = Param(_init_normal(rng, (in_ch, out_ch, 2, 2, 2), dtype))
        self.bias = Param(_init_normal(rng, (out_ch,), dtype))
        self._x = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 5 or x.shape[1] != self.in_ch:
            raise ValueError(f"expected (B,{self.in_ch},D,H,W) input, got {x.shape}")
        B, _, D, H, W = x.shape
        if train:
            self._x = x
        t = np.tensordot(x, self.weight.data, axes=([1], [0]))  # (B,D,H,W,Co,2,2,2)
        out = np.empty((B, self.out_ch, 2 * D, 2 * H, 2 * W), x.dtype)
        for kd in range(2):
            for kh in range(2):
                for kw in range(2):
                    out[:, :, kd::2, kh::2, kw::2] = t[..., kd, kh, kw].transpose(0, 4, 1, 2, 3)
        out += self.bias.data.reshape(1, -1, 1, 1, 1)
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        x = self._x
        B, _, D, H, W = x.shape
        dx = np.zeros_like(x)
        for kd in range(2):
            for kh in range(2):
                for kw in range(2):
                    gs = g[:, :, kd::2, kh::2, kw::2]
                    dx += np.tensordot(gs, self.weight.data[:, :, kd, kh, kw], axes=([1], [1])).transpose(0, 4, 1, 2, 3)
                    self.weight.grad[:, :, kd, kh, kw] += np.tensordot(
                        x, gs, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                    )
        self.bias.grad += g.sum(axis=(0, 2, 3, 4))
        return dx


def _check_even_dims(x):
    if any(s % 2 for s in x.shape[2:]):
        raise ValueError(f"pooling needs even spatial dims, got {x.shape[2:]}")


class AvgPool3d:
    """2x2x2 average pooling, stride 2."""

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        _check_even_dims(x)
        B, C, D, H, W = x.shape
        blocks = x.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
        return blocks.mean(axis=(3, 5, 7))

    def backward(self, g: np.ndarray) -> np.ndarray:
        B, C, D2, H2, W2 = g.shape
        spread = np.broadcast_to(
            (g / 8.0)[:, :, :, None, :, None, :, None], (B, C, D2, 2, H2, 2, W2, 2)
        )
        return spread.reshape(B, C, 2 * D2, 2 * H2, 2 * W2).copy()


class MaxPool3d:
    """2x2x2 max pooling, stride 2; gradient routed to the first argmax."""

    def __init__(self):
        self._idx = None
        self._shape = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        _check_even_dims(x)
        B, C, D, H, W = x.shape
        blocks = (
            x.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
            .transpose(0, 1, 2, 4, 6, 3, 5, 7)
            .reshape(B, C, D // 2, H // 2, W // 2, 8)
        )
        idx = blocks.argmax(axis=-1)
        if train:
            self._idx = idx
            self._shape = x.shape
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, g: np.ndarray) -> np.ndarray:
        B, C, D, H, W = self._shape
        blocks = np.zeros((B, C, D // 2, H // 2, W // 2, 8), g.dtype)
        np.put_along_axis(blocks, self._idx[..., None], g[..., None], axis=-1)
        return (
            blocks.reshape(B, C, D // 2, H // 2, W // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(B, C, D, H, W)
        )


class BatchNorm3d:
    """Per-channel batch normalization over (batch, depth, height, width).

    Train mode normalizes with biased batch statistics and updates running
    stats (unbiased variance, configurable momentum); eval mode uses running
    stats only.
    """

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.ch = ch
        self.eps = eps
        self.momentum = momentum
        self.gain = Param(np.ones(ch, dtype))
        self.shift = Param(np.zeros(ch, dtype))
        self.running_mean = np.zeros(ch, dtype)
        self.running_var = np.ones(ch, dtype)
        self._cache = None

    def params(self):
        return [("gain", self.gain), ("shift", self.shift)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.ch:
            raise ValueError(f"expected {self.ch} channels, got {x.shape[1]}")
        gain = self.gain.data.reshape(1, -1, 1, 1, 1)
        shift = self.shift.data.reshape(1, -1, 1, 1, 1)
        if not train:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(1, -1, 1, 1, 1)) * inv.reshape(1, -1, 1, 1, 1)
            self._cache = ("eval", xhat, inv)
            return gain * xhat + shift
        n = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        if n < 2:
            raise ValueError("batch norm train mode needs >= 2 elements per channel")
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1, 1)) * inv.reshape(1, -1, 1, 1, 1)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.dtype)
        unbiased = var * (n / (n - 1))
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(x.dtype)
        self._cache = ("train", xhat, inv)
        return gain * xhat + shift

    def backward(self, g: np.ndarray) -> np.ndarray:
        mode, xhat, inv = self._cache
        self.gain.grad += (g * xhat).sum(axis=(0, 2, 3, 4))
        self.shift.grad += g.sum(axis=(0, 2, 3, 4))
        gain = self.gain.data.reshape(1, -1, 1, 1, 1)
        if mode == "eval":
            return g * gain * inv.reshape(1, -1, 1, 1, 1)
        gx = g * gain
        mean_g = gx.mean(axis=(0, 2, 3, 4), keepdims=True)
        mean_gx = (gx * xhat).mean(axis=(0, 2, 3, 4), keepdims=True)
        return inv.reshape(1, -1, 1, 1, 1) * (gx - mean_g - xhat * mean_gx)


class ReLU:
    """Elementwise max(0, x); subgradient 0 at 0."""

    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        mask = x > 0
        if train:
            self._mask = mask
        return np.where(mask, x, x.dtype.type(0))

    def backward(self, g: np.ndarray) -> np.ndarray:
        return np.where(self._mask, g, g.dtype.type(0))


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise sum; gradients pass through to both addends."""
    if x.shape != y.shape:
        raise ValueError(f"add shape mismatch: {x.shape} vs {y.shape}")
    return x + y


def concat_channels(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"concat non-channel dims mismatch: {x.shape} vs {y.shape}")
    return np.concatenate([x, y], axis=1)


def split_channels(x: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= n <= x.shape[1]:
        raise ValueError(f"split index {n} out of range for {x.shape[1]} channels")
    return x[:, :n], x[:, n:]


def l2_loss(pred: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean squared Frobenius loss: (1/2N) sum_i ||pred_i - label_i||^2.

    Returns (loss, gradient wrt pred); the gradient is (pred - label)/N.
    """
    if pred.shape != label.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {label.shape}")
    n = pred.shape[0]
    diff = pred - label
    loss = float(np.vdot(diff, diff)) / (2 * n)
    return loss, diff / n


class Adam:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"QCKP"
CKPT_VERSION = 1


def save_checkpoint(path, named_arrays, meta: dict) -> None:
    """Write named parameter arrays plus a JSON-metadata manifest."""
    entries = []
    payloads = []
    offset = 0
    for name, arr in named_arrays:
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += data.nbytes
    manifest = json.dumps({"meta": meta, "entries": entries}).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(manifest)))
        f.write(manifest)
        for p in payloads:
            f.write(p)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (meta, {name: float32 array})."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[12 : 12 + mlen].decode())
    base = 12 + mlen
    arrays = {}
    for e in manifest["entries"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return manifest["meta"], arrays
