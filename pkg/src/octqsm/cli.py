"""Command-line front end for the reconstruction pipeline.

Every pipeline stage is reachable as a subcommand: phantom generation,
forward field simulation, threshold inversion, dataset building, training,
inference, evaluation, and the finite-difference gradient suite. Exit codes
are 0 on success, 1 on usage errors, 2 on runtime errors.

Flags can also be supplied through ``--config FILE`` where FILE holds flat
``key=value`` lines (hyphens or underscores in keys, ``#`` comments). An
explicit flag always wins over the file. ``--threads`` caps thread pools,
defaulting to the OCTQSM_THREADS environment variable, then 1.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import CropPlan, build_dataset, synthetic_labels
from .dipole import dipole_kernel, forward_field, tkd_invert
from .gradcheck import run_suite
from .metrics import compare
from .octave import DEFAULT_SNR_LIST, NetworkConfig, OctaveUNet
from .phantoms import ShapeConfig, random_shapes, shepp_logan
from .training import DEFAULT_SCHEDULE, TrainConfig, clip_schedule, infer_full, infer_patches, train
from .volume import Unit, Volume, read_volume, write_volume

_limiter = None


def parse_dims(text) -> tuple[int, int, int]:
    """Accept a single size or a comma-separated triple."""
    if isinstance(text, tuple):
        return text
    parts = [int(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"expected 1 or 3 positive sizes, got {text!r}")
    return tuple(parts)


def parse_voxel(text) -> tuple[float, float, float]:
    if isinstance(text, tuple):
        return text
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) <= 0:
        raise ValueError(f"expected 1 or 3 positive spacings, got {text!r}")
    return tuple(parts)


def parse_float_list(text) -> tuple[float, ...]:
    if isinstance(text, tuple):
        return text
    values = tuple(float(p) for p in str(text).split(",") if p)
    if not values:
        raise ValueError("empty list")
    return values


def parse_schedule(text) -> tuple[tuple[int, int, float], ...]:
    """Parse "1-50:1e-3,51-80:1e-4" into ((1, 50, 1e-3), (51, 80, 1e-4))."""
    if isinstance(text, tuple):
        return text
    spans = []
    for chunk in str(text).split(","):
        span, _, lr = chunk.partition(":")
        start, _, end = span.partition("-")
        spans.append((int(start), int(end), float(lr)))
    return tuple(spans)


def read_config(path) -> dict[str, str]:
    """Flat key=value file; keys map to flag names with - or _ freely."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {raw!r} is not key=value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _common(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--threads", type=int, default=None,
                        help="thread-pool cap (default: OCTQSM_THREADS or 1)")
    parser.add_argument("--seed", type=int, default=0, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octqsm",
                                     description="dipole inversion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic susceptibility volume")
    p.add_argument("kind", choices=("shepp", "shapes"))
    p.add_argument("--dims", type=parse_dims, default=(64, 64, 64))
    p.add_argument("--voxel-size", type=parse_voxel, default=(1.0, 1.0, 1.0))
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("field", help="simulate the forward field of a volume")
    p.add_argument("--chi", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("tkd", help="threshold k-space division inversion")
    p.add_argument("--field", required=True)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_tkd)

    p = sub.add_parser("dataset", help="build a training dataset of field/label patches")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10, help="number of source volumes")
    p.add_argument("--dims", type=parse_dims, default=(48, 48, 48),
                   help="source volume size")
    p.add_argument("--patch-size", type=parse_dims, default=(48, 48, 48))
    p.add_argument("--stride", type=parse_dims, default=(48, 48, 48))
    p.add_argument("--random-extra", type=int, default=0,
                   help="extra random crops per source volume")
    _common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the network on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--noise-p", type=float, default=0.2)
    p.add_argument("--snr-list", type=parse_float_list, default=DEFAULT_SNR_LIST)
    p.add_argument("--lr-schedule", type=parse_schedule, default=None,
                   help='e.g. "1-50:1e-3,51-80:1e-4" (default: preset clipped to --epochs)')
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also keep a checkpoint every N epochs")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct susceptibility from a field map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("full", "patches"), default="full")
    p.add_argument("--patch-size", type=parse_dims, default=(48, 48, 48))
    p.add_argument("--stride", type=parse_dims, default=(16, 16, 16))
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="compare a reconstruction against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--labels", default=None, help="integer region volume for ROI stats")
    p.add_argument("--out", default=None, help="also write the TSV report here")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _shape_config(dims, seed) -> ShapeConfig:
    """Default random-shape ranges, scaled down when the volume is small."""
    span = min(dims) - 1
    radius_hi = min(12.0, span / 2)
    edge_hi = min(20.0, float(span))
    return ShapeConfig(
        dims=dims,
        sphere_radius_range=(min(3.0, radius_hi), radius_hi),
        cuboid_edge_range=(min(4.0, edge_hi), edge_hi),
        seed=seed,
    )


def _labels_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + "_labels" + out.suffix)


def cmd_phantom(args) -> int:
    if args.kind == "shepp":
        phantom = shepp_logan(args.dims, voxel_size=args.voxel_size)
        write_volume(phantom.chi, args.out)
        labels = Volume(phantom.labels.astype(np.float32), args.voxel_size, Unit.unitless)
        write_volume(labels, _labels_path(args.out))
        print(f"wrote {args.out} and {_labels_path(args.out)}")
    else:
        write_volume(random_shapes(_shape_config(args.dims, args.seed)), args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_field(args) -> int:
    chi = read_volume(args.chi)
    kernel = dipole_kernel(chi.dims, chi.voxel_size)
    write_volume(forward_field(chi, kernel), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_tkd(args) -> int:
    field = read_volume(args.field)
    kernel = dipole_kernel(field.dims, field.voxel_size)
    write_volume(tkd_invert(field, kernel, args.threshold), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_dataset(args) -> int:
    config = _shape_config(args.dims, args.seed)
    plan = CropPlan(args.patch_size, args.stride,
                    random_extra=args.random_extra, seed=args.seed)
    labels = synthetic_labels(args.count, config, seed=args.seed)
    manifest = build_dataset(labels, plan, args.out)
    print(f"wrote {manifest.count} patch pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    net_config = NetworkConfig(width=args.width, noise_p=args.noise_p,
                               snr_list=tuple(args.snr_list))
    schedule = args.lr_schedule
    if schedule is None:
        schedule = clip_schedule(DEFAULT_SCHEDULE, args.epochs)
    train_config = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                               lr_schedule=schedule, seed=args.seed,
                               checkpoint_every=args.checkpoint_every)
    net = OctaveUNet(net_config, np.random.default_rng(np.random.SeedSequence([args.seed, 0])))
    history = train(net, args.data, train_config, args.out)
    first, last = history[0][1], history[-1][1]
    print(f"trained {args.epochs} epochs, mean loss {first:.6g} -> {last:.6g}")
    return 0


def cmd_infer(args) -> int:
    net = OctaveUNet.load(args.checkpoint)
    field = read_volume(args.field)
    if args.mode == "full":
        out = infer_full(net, field)
    else:
        out = infer_patches(net, field, args.patch_size, args.stride)
    write_volume(out, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = read_volume(args.pred)
    ref = read_volume(args.ref)
    labels = None
    if args.labels is not None:
        labels = np.rint(read_volume(args.labels).data).astype(np.int32)
    report = compare(pred.data, ref.data, labels)
    text = report.to_tsv()
    sys.stdout.write(text)
    if args.out is not None:
        Path(args.out).write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    return 0 if run_suite(seed=args.seed) else 2


def _apply_config(parser, argv: list[str]) -> argparse.Namespace:
    """Parse argv, filling unset flags from --config when given.

    The file holds key=value pairs keyed by flag name. Keys that do not
    belong to the invoked subcommand are ignored so one file can drive a
    whole pipeline. Explicit flags win because file values only replace
    parser defaults.
    """
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    values = read_config(args.config)
    if not values:
        return args
    actions = {}
    for group in parser._subparsers._group_actions:
        subparser = group.choices[args.command]
        for action in subparser._actions:
            if action.dest not in ("help", "config"):
                actions[action.dest] = action
    overrides = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            continue
        overrides[key] = action.type(raw) if action.type is not None else raw
    if not overrides:
        return args
    # Re-parse with file values as defaults; command-line flags still win.
    for group in parser._subparsers._group_actions:
        group.choices[args.command].set_defaults(**overrides)
    return parser.parse_args(argv)


def run(argv=None) -> int:
    """Dispatch a command line; returns the process exit code."""
    global _limiter
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = _apply_config(parser, list(argv))
    except SystemExit as exc:
        return 0 if not exc.code else 1
    except (ValueError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get("OCTQSM_THREADS", "1"))
        _limiter = threadpool_limits(limits=threads)
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
