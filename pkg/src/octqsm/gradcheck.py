"""Central finite-difference validation of the engine's backward passes.

Every differentiable primitive is checked in 64-bit against central
differences on randomized small tensors; the assembled network is checked
end to end on a sampled subset of its parameters. ReLU and max-pool are
checked away from their kink sets.
"""

from __future__ import annotations

import numpy as np

from . import engine


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    """Relative error with an absolute guard: values whose magnitudes both
    sit below the floor are compared at the floor scale, so central-difference
    roundoff noise on true-zero gradients (about 1e-9 for unit-scale losses)
    is not divided by itself."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check_array(loss_fn, arr: np.ndarray, analytic: np.ndarray, rng, samples: int = 10, h: float = 1e-5) -> float:
    """Max relative error between central differences and analytic over a
    random sample of entries of arr. loss_fn() must use arr's live contents."""
    n = arr.size
    idxs = rng.choice(n, size=min(samples, n), replace=False)
    worst = 0.0
    for flat in idxs:
        orig = arr.flat[flat]
        arr.flat[flat] = orig + h
        lp = loss_fn()
        arr.flat[flat] = orig - h
        lm = loss_fn()
        arr.flat[flat] = orig
        num = (lp - lm) / (2 * h)
        worst = max(worst, rel_err(num, float(analytic.flat[flat])))
    return worst


def _layer_probe(layer, x: np.ndarray, rng, check_input: bool = True, samples: int = 8):
    """Generic layer check: loss = sum(forward(x) * coef)."""
    coef = rng.standard_normal(layer.forward(x, train=True).shape)

    def loss_fn():
        return float(np.sum(layer.forward(x, train=True) * coef))

    for _, p in layer.params():
        p.zero_grad()
    out = layer.forward(x, train=True)
    dx = layer.backward(coef)
    del out
    worst = 0.0
    for _, p in layer.params():
        worst = max(worst, fd_check_array(loss_fn, p.data, p.grad, rng, samples))
    if check_input:
        worst = max(worst, fd_check_array(loss_fn, x, dx, rng, samples))
    return worst


def check_layers(seed: int = 0) -> dict[str, float]:
    """Run the per-layer finite-difference suite; returns max rel errors."""
    rng = np.random.default_rng(seed)
    res = {}

    x = rng.standard_normal((1, 2, 4, 4, 4))
    conv = engine.Conv3d(2, 3, k=3, rng=rng, dtype=np.float64)
    res["conv3d_k3"] = _layer_probe(conv, x, rng)

    conv1 = engine.Conv3d(2, 2, k=1, rng=rng, dtype=np.float64)
    res["conv3d_k1"] = _layer_probe(conv1, x.copy(), rng)

    ct = engine.ConvTranspose3d(2, 3, rng=rng, dtype=np.float64)
    res["conv_transpose3d"] = _layer_probe(ct, rng.standard_normal((1, 2, 2, 2, 2)), rng)

    res["avg_pool3d"] = _layer_probe(engine.AvgPool3d(), rng.standard_normal((2, 2, 4, 4, 4)), rng)
    res["max_pool3d"] = _layer_probe(engine.MaxPool3d(), rng.standard_normal((2, 2, 4, 4, 4)), rng)

    bn = engine.BatchNorm3d(3, dtype=np.float64)
    bn.gain.data = 1.0 + 0.1 * rng.standard_normal(3)
    bn.shift.data = 0.1 * rng.standard_normal(3)
    bn.gain.grad = np.zeros(3)
    bn.shift.grad = np.zeros(3)
    res["batch_norm3d"] = _layer_probe(bn, rng.standard_normal((2, 3, 4, 4, 4)), rng)

    xr = rng.standard_normal((2, 2, 4, 4, 4))
    xr += np.where(xr >= 0, 0.2, -0.2)  # keep entries away from the ReLU kink
    res["relu"] = _layer_probe(engine.ReLU(), xr, rng)

    pred = rng.standard_normal((3, 1, 4, 4, 4))
    label = rng.standard_normal((3, 1, 4, 4, 4))
    _, gan = engine.l2_loss(pred, label)

    def loss_fn():
        return engine.l2_loss(pred, label)[0]

    res["l2_loss"] = fd_check_array(loss_fn, pred, gan, rng, samples=10)
    return res


def check_network(width: int = 4, dims: int = 8, seed: int = 0, samples: int = 50) -> float:
    """End-to-end check: l2_loss(network(x), label) gradient wrt a random
    sample of parameters, 64-bit, train-mode batch norm, noise disabled."""
    from .octave import NetworkConfig, OctaveUNet

    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(width=width, noise_p=0.0, dtype="float64")
    net = OctaveUNet(cfg, rng=rng)
    x = rng.standard_normal((2, 1, dims, dims, dims))
    label = rng.standard_normal((2, 1, dims, dims, dims))

    def loss_fn():
        return engine.l2_loss(net.forward(x, train=True), label)[0]

    net.zero_grad()
    pred = net.forward(x, train=True)
    _, g = engine.l2_loss(pred, label)
    net.backward(g)

    named = net.named_params()
    flat_sizes = np.array([p.data.size for _, p in named])
    total = int(flat_sizes.sum())
    picks = rng.choice(total, size=min(samples, total), replace=False)
    bounds = np.cumsum(flat_sizes)
    worst = 0.0
    # Step below the scale at which a parameter nudge, amplified through the
    # batch statistics, flips ReLU or argmax states; well above roundoff.
    h = 1e-6
    for pick in picks:
        pi = int(np.searchsorted(bounds, pick, side="right"))
        flat = int(pick - (bounds[pi - 1] if pi else 0))
        p = named[pi][1]
        orig = p.data.flat[flat]
        p.data.flat[flat] = orig + h
        lp = loss_fn()
        p.data.flat[flat] = orig - h
        lm = loss_fn()
        p.data.flat[flat] = orig
        num = (lp - lm) / (2 * h)
        # Batch norm makes additive parameters (conv biases feeding a norm)
        # true zero-gradient; the floor keeps finite-difference roundoff on
        # those coordinates from reading as disagreement.
        worst = max(worst, rel_err(num, float(p.grad.flat[flat]), floor=1e-4))
    return worst


def run_suite(seed: int = 0, verbose: bool = True) -> bool:
    """Layer suite plus end-to-end check; True when all pass the suite tolerances."""
    layer_errs = check_layers(seed)
    ok = True
    for name, err in layer_errs.items():
        passed = err < 1e-4
        ok = ok and passed
        if verbose:
            print(f"{name:20s} rel_err {err:.3e}  {'ok' if passed else 'FAIL'}")
    net_err = check_network(seed=seed)
    net_ok = net_err < 1e-3
    ok = ok and net_ok
    if verbose:
        print(f"{'network_end_to_end':20s} rel_err {net_err:.3e}  {'ok' if net_ok else 'FAIL'}")
    return ok
