"""Octave convolution, the stochastic noise layer, and the assembled U-net.

An octave feature carries a high-resolution and a half-resolution channel
group. The octave convolution mixes the groups with four conv paths:

    Y_H = Conv_HH(X_H) + ConvT(Conv_LH(X_L))
    Y_L = Conv_HL(AvgPool(X_H)) + Conv_LL(X_L)

where all main kernels are 3^3 stride 1 "same", the pool is 2^3 stride 2,
and the transposed conv (2^3 stride 2) restores the high resolution.
Degenerate alphas drop the absent branch's paths entirely.

The network is a two-scale-level U-net: a noise-augmentation layer, 10
octave convolutions, 2 max-pools, 2 upsampling transposed convolutions, 12
batch norms (one per octave conv and per up-conv, normalizing each branch
over its own channels), skip concatenations at both encoder levels, a final
1^3 convolution, and a residual add of the network input (post-noise in
training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import (
    AvgPool3d,
    BatchNorm3d,
    Conv3d,
    ConvTranspose3d,
    MaxPool3d,
    Param,
    ReLU,
    add,
    concat_channels,
    load_checkpoint,
    save_checkpoint,
    split_channels,
)

DEFAULT_SNR_LIST = (40.0, 20.0, 10.0, 5.0)


class NonFiniteActivationError(RuntimeError):
    """A forward pass produced NaN/Inf, reported with the layer name."""


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and noise-layer settings; width is the total channel
    count at the input level (doubling per pooling level)."""

    width: int = 32
    alpha: float = 0.5
    noise_p: float = 0.2
    snr_list: tuple[float, ...] = DEFAULT_SNR_LIST
    divisor: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        if self.width < 2 or self.width % 2:
            raise ValueError(f"width must be even and >= 2, got {self.width}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if not 0.0 <= self.noise_p <= 1.0:
            raise ValueError(f"noise_p must be in [0,1], got {self.noise_p}")
        if not self.snr_list or any(s <= 0 for s in self.snr_list):
            raise ValueError(f"snr_list must be nonempty positive, got {self.snr_list}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "alpha": self.alpha,
            "noise_p": self.noise_p,
            "snr_list": list(self.snr_list),
            "divisor": self.divisor,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            width=int(d["width"]),
            alpha=float(d["alpha"]),
            noise_p=float(d["noise_p"]),
            snr_list=tuple(float(s) for s in d["snr_list"]),
            divisor=int(d["divisor"]),
            dtype=str(d["dtype"]),
        )


class OctFeature:
    """Paired high/low-resolution feature tensors; either may be absent."""

    __slots__ = ("high", "low")

    def __init__(self, high: np.ndarray | None, low: np.ndarray | None = None):
        if high is None and low is None:
            raise ValueError("octave feature needs at least one branch")
        if high is not None and low is not None:
            hd, ld = high.shape[2:], low.shape[2:]
            if tuple(2 * s for s in ld) != tuple(hd):
                raise ValueError(f"low dims {ld} must be half of high dims {hd}")
        self.high = high
        self.low = low


def split_high(alpha: float, channels: int) -> int:
    """Channels assigned to the high-resolution group: round(alpha * c)."""
    return int(round(alpha * channels))


def noise_layer(x: np.ndarray, rng: np.random.Generator | None, p: float, snr_list) -> np.ndarray:
    """Gaussian noise augmentation at a random SNR, applied per mini-batch.

    Draws one uniform u; if u >= p the input passes unchanged, otherwise an
    SNR is drawn from snr_list and noise with per-element variance
    Power(x)/SNR is added, Power being the mean square over the whole batch
    tensor. With p=0 (or no rng) no draw is consumed. Never differentiated
    through; training-mode only by construction (callers skip it in eval).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"noise probability must be in [0,1], got {p}")
    if len(snr_list) == 0:
        raise ValueError("snr_list must be nonempty")
    if rng is None or p == 0.0:
        return x
    if rng.random() >= p:
        return x
    snr = float(snr_list[int(rng.integers(len(snr_list)))])
    power = float(np.mean(np.square(x, dtype=np.float64)))
    std = np.sqrt(power / snr)
    return x + (rng.standard_normal(x.shape) * std).astype(x.dtype)


def _opt_add(a: np.ndarray | None, b: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


class OctConv:
    """The four-path octave convolution (plus the LH upsampling kernel)."""

    def __init__(self, in_high: int, in_low: int, out_high: int, out_low: int, rng, dtype=np.float32):
        if in_high + in_low == 0 or out_high + out_low == 0:
            raise ValueError("octave conv needs input and output channels")
        self.in_high, self.in_low = in_high, in_low
        self.out_high, self.out_low = out_high, out_low
        self.hh = Conv3d(in_high, out_high, 3, rng, dtype) if in_high and out_high else None
        self.hl = Conv3d(in_high, out_low, 3, rng, dtype) if in_high and out_low else None
        self.lh = Conv3d(in_low, out_high, 3, rng, dtype) if in_low and out_high else None
        self.lh_up = ConvTranspose3d(out_high, out_high, rng, dtype) if self.lh else None
        self.ll = Conv3d(in_low, out_low, 3, rng, dtype) if in_low and out_low else None
        self.pool = AvgPool3d()

    @classmethod
    def from_alphas(cls, c_in: int, c_out: int, alpha_in: float, alpha_out: float, rng, dtype=np.float32):
        hi_in = split_high(alpha_in, c_in)
        hi_out = split_high(alpha_out, c_out)
        return cls(hi_in, c_in - hi_in, hi_out, c_out - hi_out, rng, dtype)

    def params(self):
        out = []
        for sub in ("hh", "hl", "lh", "lh_up", "ll"):
            layer = getattr(self, sub)
            if layer is not None:
                out.extend((f"{sub}.{n}", p) for n, p in layer.params())
        return out

    def main_kernel_weight_count(self) -> int:
        """Learnable weights in the four 3^3 kernels (the transposed-conv
        upsampler and the biases are the only surplus)."""
        return sum(
            getattr(self, sub).weight.data.size
            for sub in ("hh", "hl", "lh", "ll")
            if getattr(self, sub) is not None
        )

    def forward(self, f: OctFeature, train: bool = False) -> OctFeature:
        if (f.high is None) != (self.in_high == 0) or (f.low is None) != (self.in_low == 0):
            raise ValueError("octave feature branches inconsistent with layer channels")
        y_high = y_low = None
        if self.hh is not None:
            y_high = self.hh.forward(f.high, train)
        if self.lh is not None:
            y_high = _opt_add(y_high, self.lh_up.forward(self.lh.forward(f.low, train), train))
        if self.hl is not None:
            y_low = self.hl.forward(self.pool.forward(f.high, train), train)
        if self.ll is not None:
            y_low = _opt_add(y_low, self.ll.forward(f.low, train))
        return OctFeature(y_high, y_low)

    def backward(self, g: OctFeature) -> OctFeature:
        dx_high = dx_low = None
        if self.hh is not None:
            dx_high = self.hh.backward(g.high)
        if self.hl is not None:
            dx_high = _opt_add(dx_high, self.pool.backward(self.hl.backward(g.low)))
        if self.ll is not None:
            dx_low = self.ll.backward(g.low)
        if self.lh is not None:
            dx_low = _opt_add(dx_low, self.lh.backward(self.lh_up.backward(g.high)))
        return OctFeature(dx_high, dx_low) if (dx_high is not None or dx_low is not None) else None


class _PerBranch:
    """Applies an independent sublayer to each present branch."""

    def __init__(self, high, low):
        self.high = high
        self.low = low

    def params(self):
        out = []
        for sub in ("high", "low"):
            layer = getattr(self, sub)
            if layer is not None:
                out.extend((f"{sub}.{n}", p) for n, p in layer.params())
        return out

    def forward(self, f: OctFeature, train: bool = False) -> OctFeature:
        return OctFeature(
            self.high.forward(f.high, train) if f.high is not None else None,
            self.low.forward(f.low, train) if f.low is not None else None,
        )

    def backward(self, g: OctFeature) -> OctFeature:
        return OctFeature(
            self.high.backward(g.high) if g.high is not None else None,
            self.low.backward(g.low) if g.low is not None else None,
        )


class OctBatchNorm(_PerBranch):
    """Batch norm per branch, each over its own channels; one logical layer."""

    def __init__(self, ch_high: int, ch_low: int, dtype=np.float32):
        super().__init__(
            BatchNorm3d(ch_high, dtype=dtype) if ch_high else None,
            BatchNorm3d(ch_low, dtype=dtype) if ch_low else None,
        )


class OctMaxPool(_PerBranch):
    """Max pooling of both branches; one logical downsampling layer."""

    def __init__(self):
        super().__init__(MaxPool3d(), MaxPool3d())


class OctReLU(_PerBranch):
    def __init__(self):
        super().__init__(ReLU(), ReLU())


class OctUpConv(_PerBranch):
    """Upsampling transposed convolution (2^3, stride 2) of both branches."""

    def __init__(self, in_high: int, in_low: int, out_high: int, out_low: int, rng, dtype=np.float32):
        super().__init__(
            ConvTranspose3d(in_high, out_high, rng, dtype),
            ConvTranspose3d(in_low, out_low, rng, dtype),
        )


def _concat_oct(a: OctFeature, b: OctFeature) -> OctFeature:
    return OctFeature(concat_channels(a.high, b.high), concat_channels(a.low, b.low))


def _split_oct(g: OctFeature, n_high: int, n_low: int) -> tuple[OctFeature, OctFeature]:
    gh_a, gh_b = split_channels(g.high, n_high)
    gl_a, gl_b = split_channels(g.low, n_low)
    return OctFeature(gh_a, gl_a), OctFeature(gh_b, gl_b)


class OctaveUNet:
    """The assembled octave U-net with residual input skip."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence([0, 0]))
        dt = config.np_dtype
        w = config.width
        h = w // 2  # high/low channels at the input level

        def oct(in_h, in_l, out_h, out_l):
            return OctConv(in_h, in_l, out_h, out_l, rng, dt)

        self.oct1a = oct(1, 0, h, h)
        self.bn1a = OctBatchNorm(h, h, dt)
        self.oct1b = oct(h, h, h, h)
        self.bn1b = OctBatchNorm(h, h, dt)
        self.pool1 = OctMaxPool()
        self.oct2a = oct(h, h, w, w)
        self.bn2a = OctBatchNorm(w, w, dt)
        self.oct2b = oct(w, w, w, w)
        self.bn2b = OctBatchNorm(w, w, dt)
        self.pool2 = OctMaxPool()
        self.oct3a = oct(w, w, 2 * w, 2 * w)
        self.bn3a = OctBatchNorm(2 * w, 2 * w, dt)
        self.oct3b = oct(2 * w, 2 * w, 2 * w, 2 * w)
        self.bn3b = OctBatchNorm(2 * w, 2 * w, dt)
        self.up1 = OctUpConv(2 * w, 2 * w, w, w, rng, dt)
        self.bn_u1 = OctBatchNorm(w, w, dt)
        self.oct4a = oct(2 * w, 2 * w, w, w)
        self.bn4a = OctBatchNorm(w, w, dt)
        self.oct4b = oct(w, w, w, w)
        self.bn4b = OctBatchNorm(w, w, dt)
        self.up2 = OctUpConv(w, w, h, h, rng, dt)
        self.bn_u2 = OctBatchNorm(h, h, dt)
        self.oct5a = oct(w, w, h, h)
        self.bn5a = OctBatchNorm(h, h, dt)
        self.oct5b = oct(h, h, w, 0)  # alpha_out = 1: single high-res output
        self.bn5b = OctBatchNorm(w, 0, dt)
        self.final = Conv3d(w, 1, 1, rng, dt)

        self._relus = {name: OctReLU() for name in
                       ("1a", "1b", "2a", "2b", "3a", "3b", "u1", "4a", "4b", "u2", "5a", "5b")}
        self.layers = [
            ("oct1a", self.oct1a), ("bn1a", self.bn1a),
            ("oct1b", self.oct1b), ("bn1b", self.bn1b),
            ("pool1", self.pool1),
            ("oct2a", self.oct2a), ("bn2a", self.bn2a),
            ("oct2b", self.oct2b), ("bn2b", self.bn2b),
            ("pool2", self.pool2),
            ("oct3a", self.oct3a), ("bn3a", self.bn3a),
            ("oct3b", self.oct3b), ("bn3b", self.bn3b),
            ("up1", self.up1), ("bn_u1", self.bn_u1),
            ("oct4a", self.oct4a), ("bn4a", self.bn4a),
            ("oct4b", self.oct4b), ("bn4b", self.bn4b),
            ("up2", self.up2), ("bn_u2", self.bn_u2),
            ("oct5a", self.oct5a), ("bn5a", self.bn5a),
            ("oct5b", self.oct5b), ("bn5b", self.bn5b),
            ("final", self.final),
        ]

    # -- parameter plumbing

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for name, layer in self.layers:
            out.extend((f"{name}.{n}", p) for n, p in layer.params())
        return out

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def layer_inventory(self) -> dict[str, int]:
        """Structural audit counts of the assembled graph."""
        counts = {
            "octconv": 0,
            "max_pool": 0,
            "upsampling_transposed_conv": 0,
            "batch_norm": 0,
            "final_conv": 0,
            "noise": 1,
        }
        for name, layer in self.layers:
            if isinstance(layer, OctConv):
                counts["octconv"] += 1
            elif isinstance(layer, OctMaxPool):
                counts["max_pool"] += 1
            elif isinstance(layer, OctUpConv):
                counts["upsampling_transposed_conv"] += 1
            elif isinstance(layer, OctBatchNorm):
                counts["batch_norm"] += 1
            elif isinstance(layer, Conv3d):
                counts["final_conv"] += 1
        return counts

    # -- forward / backward

    @staticmethod
    def _check_finite(tag: str, f: OctFeature) -> OctFeature:
        # Checked before the ReLU: its zero branch would mask NaN.
        for branch in (f.high, f.low):
            if branch is not None and not np.all(np.isfinite(branch)):
                raise NonFiniteActivationError(f"non-finite activation in stage {tag}")
        return f

    def _stage(self, tag: str, oct_layer, bn, f: OctFeature, train: bool) -> OctFeature:
        f = oct_layer.forward(f, train)
        f = self._check_finite(tag, bn.forward(f, train))
        return self._relus[tag].forward(f, train)

    def forward(self, x: np.ndarray, train: bool = False, noise_rng=None) -> np.ndarray:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (B,1,D,H,W) input, got {x.shape}")
        m = self.config.divisor
        if any(s % m for s in x.shape[2:]):
            raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {m}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        if train:
            x = noise_layer(x, noise_rng, self.config.noise_p, self.config.snr_list)
        x = np.ascontiguousarray(x, self.config.np_dtype)
        self._x0 = x

        e1 = self._stage("1a", self.oct1a, self.bn1a, OctFeature(x, None), train)
        e1 = self._stage("1b", self.oct1b, self.bn1b, e1, train)
        f = self.pool1.forward(e1, train)
        e2 = self._stage("2a", self.oct2a, self.bn2a, f, train)
        e2 = self._stage("2b", self.oct2b, self.bn2b, e2, train)
        f = self.pool2.forward(e2, train)
        f = self._stage("3a", self.oct3a, self.bn3a, f, train)
        f = self._stage("3b", self.oct3b, self.bn3b, f, train)
        u1 = self.up1.forward(f, train)
        u1 = self._check_finite("u1", self.bn_u1.forward(u1, train))
        u1 = self._relus["u1"].forward(u1, train)
        self._u1_ch = (u1.high.shape[1], u1.low.shape[1])
        f = _concat_oct(u1, e2)
        f = self._stage("4a", self.oct4a, self.bn4a, f, train)
        f = self._stage("4b", self.oct4b, self.bn4b, f, train)
        u2 = self.up2.forward(f, train)
        u2 = self._check_finite("u2", self.bn_u2.forward(u2, train))
        u2 = self._relus["u2"].forward(u2, train)
        self._u2_ch = (u2.high.shape[1], u2.low.shape[1])
        f = _concat_oct(u2, e1)
        f = self._stage("5a", self.oct5a, self.bn5a, f, train)
        f = self._stage("5b", self.oct5b, self.bn5b, f, train)
        y = self.final.forward(f.high, train)
        return add(y, x)

    def _unstage(self, tag: str, oct_layer, bn, g: OctFeature) -> OctFeature:
        g = self._relus[tag].backward(g)
        g = bn.backward(g)
        return oct_layer.backward(g)

    def backward(self, g: np.ndarray) -> None:
        """Accumulates parameter gradients for the last train-mode forward.

        The residual path's contribution stops at the (post-noise) input,
        which is data, so no input gradient is returned.
        """
        gf = OctFeature(self.final.backward(np.ascontiguousarray(g)), None)
        gf = self._unstage("5b", self.oct5b, self.bn5b, gf)
        gf = self._unstage("5a", self.oct5a, self.bn5a, gf)
        g_u2, g_e1 = _split_oct(gf, *self._u2_ch)
        g_u2 = self._relus["u2"].backward(g_u2)
        g_u2 = self.bn_u2.backward(g_u2)
        gf = self.up2.backward(g_u2)
        gf = self._unstage("4b", self.oct4b, self.bn4b, gf)
        gf = self._unstage("4a", self.oct4a, self.bn4a, gf)
        g_u1, g_e2 = _split_oct(gf, *self._u1_ch)
        g_u1 = self._relus["u1"].backward(g_u1)
        g_u1 = self.bn_u1.backward(g_u1)
        gf = self.up1.backward(g_u1)
        gf = self._unstage("3b", self.oct3b, self.bn3b, gf)
        gf = self._unstage("3a", self.oct3a, self.bn3a, gf)
        gf = self.pool2.backward(gf)
        gf = OctFeature(add(gf.high, g_e2.high), add(gf.low, g_e2.low))
        gf = self._unstage("2b", self.oct2b, self.bn2b, gf)
        gf = self._unstage("2a", self.oct2a, self.bn2a, gf)
        gf = self.pool1.backward(gf)
        gf = OctFeature(add(gf.high, g_e1.high), add(gf.low, g_e1.low))
        gf = self._unstage("1b", self.oct1b, self.bn1b, gf)
        self._unstage("1a", self.oct1a, self.bn1a, gf)

    # -- persistence

    def _named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self.layers:
            if isinstance(layer, OctBatchNorm):
                for sub in ("high", "low"):
                    bn = getattr(layer, sub)
                    if bn is not None:
                        out.append((f"{name}.{sub}.running_mean", bn.running_mean))
                        out.append((f"{name}.{sub}.running_var", bn.running_var))
        return out

    def save(self, path) -> None:
        named = [(n, p.data) for n, p in self.named_params()]
        named.extend(self._named_buffers())
        save_checkpoint(path, named, {"format": "octave-unet", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "OctaveUNet":
        meta, arrays = load_checkpoint(path)
        if meta.get("format") != "octave-unet":
            raise ValueError(f"{path}: not an octave-unet checkpoint")
        config = NetworkConfig.from_dict(meta["config"])
        net = cls(config)
        dt = config.np_dtype
        expected = {n: p for n, p in net.named_params()}
        for name, p in expected.items():
            if name not in arrays:
                raise ValueError(f"{path}: missing parameter {name}")
            arr = arrays[name].astype(dt)
            if arr.shape != p.data.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            p.data = arr
        for name, buf in net._named_buffers():
            if name not in arrays:
                raise ValueError(f"{path}: missing buffer {name}")
            buf[...] = arrays[name].astype(dt)
        return net
