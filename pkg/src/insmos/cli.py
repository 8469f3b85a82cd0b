"""Command-line entry point: ``insmos <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io

log = logging.getLogger("insmos")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class CLIError(ValueError):
    """Invalid arguments or configuration."""


def _load_config(args):
    if not args.config:
        return {}
    try:
        cfg = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CLIError("config must be a JSON object")
    return cfg


# ------------------------------------------------------------------ commands


def cmd_simulate(args):
    from .synth import simulate_dataset

    if args.count < 1:
        raise CLIError("--count must be positive")
    out = simulate_dataset(args.out, args.count, _load_config(args), seed=args.seed)
    print(f"wrote {args.count} scenes to {out}")


def cmd_voxelize(args):
    from .events import event_mask, load_events, voxelize

    dtype = np.float64 if args.dtype == "f64" else np.float32
    ev = load_events(args.events, args.width, args.height)
    workers = 1 if args.deterministic else args.workers
    grid = voxelize(ev, args.bins, dtype=dtype, workers=workers)
    io.save_tensor(args.out, grid.data)
    if args.mask_out:
        io.save_tensor(args.mask_out, event_mask(ev).data)
    print(f"voxelized {len(ev)} events into {grid.data.shape} -> {args.out}")


def cmd_train(args):
    from .data import load_samples
    from .plotting import plot_loss_curves
    from .train import TrainConfig, train

    cfg_dict = _load_config(args)
    cfg_dict.setdefault("seed", args.seed)
    cfg_dict.setdefault("dtype", args.dtype)
    for key in ("steps", "batch_size", "modality", "ffe"):
        val = getattr(args, key)
        if val is not None:
            cfg_dict[key] = val
    try:
        cfg = TrainConfig(**cfg_dict)
    except TypeError as exc:
        raise CLIError(f"unknown training option: {exc}") from None
    samples = load_samples(args.data)
    _, rows = train(samples, cfg, out_dir=args.out, progress_every=args.log_every)
    plot_loss_curves(rows, Path(args.out) / "losses.png")
    print(f"trained {cfg.steps} steps; final loss {rows[-1][1]:.4f}; run saved to {args.out}")


def cmd_eval(args):
    from .evaluation import evaluate_dirs
    from .plotting import plot_iou_histogram

    report = evaluate_dirs(args.pred, args.gt)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    out.with_suffix(".csv").write_text(report.to_csv())
    plot_iou_histogram([s["mIoU_01"] for s in report.samples], out.with_suffix(".png"), "foreground IoU")
    print(f"mAP {report.mAP:.4f}  mIoU_ins {report.mIoU_ins:.4f}  mIoU_01 {report.mIoU_01:.4f}  "
          f"F {report.f_measure:.4f}")


def cmd_infer(args):
    from .evaluation import predict
    from .infer import write_prediction
    from .synth import load_scene, scene_dirs
    from .train import load_run

    if not 0.0 <= args.theta <= 1.0:
        raise CLIError("--theta must lie in [0, 1]")
    model = load_run(args.model)
    dirs = scene_dirs(args.data)
    if not dirs:
        raise FileNotFoundError(f"no scenes under {args.data}")
    for d in dirs:
        seg, flow = predict(model, load_scene(d), args.theta, args.event_fraction, flow=args.flow)
        write_prediction(args.out, d.name, seg, flow)
    print(f"wrote predictions for {len(dirs)} scenes to {args.out}")


def cmd_gradcheck(args):
    from .gradsuite import format_report, run_suite

    results = run_suite(seed=args.seed, include_model=not args.skip_model)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VALIDATION
    print("all cases passed")
    return EXIT_OK


def cmd_viz(args):
    from . import viz

    if args.flow:
        viz.write_flow_image(args.out, io.read_flo(args.flow), args.max_flow)
    elif args.scene:
        from .infer import read_prediction

        scene = Path(args.scene)
        image = io.read_pgm(scene / "frame_0.pgm") / 255.0
        if args.pred:
            masks, _ = read_prediction(args.pred, scene.name)
        else:
            from .evaluation import gt_from_scene

            masks = gt_from_scene(scene)
        viz.write_overlay(args.out, image, masks)
    else:
        raise CLIError("viz needs --flow or --scene")
    print(f"wrote {args.out}")


# -------------------------------------------------------------------- parser


def _global_flags(parser, suppress):
    # the subcommand copy must not clobber values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0))
    parser.add_argument("--deterministic", action="store_true", default=d(False),
                        help="single-threaded, order-fixed execution")
    parser.add_argument("--dtype", choices=("f32", "f64"), default=d("f32"))
    parser.add_argument("--config", default=d(None), help="JSON file with command options")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="insmos", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("voxelize", parents=[common], help="event file -> TNS0 voxel grid")
    s.add_argument("--events", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--mask-out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("train", parents=[common], help="train the toy model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--modality", choices=("fused", "events", "image_pair"))
    s.add_argument("--ffe", choices=("sf", "uf", "sf+uf", "off"))
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score predictions against a dataset")
    s.add_argument("--pred", required=True, help="prediction archive or dataset directory")
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True, help="JSON report path; CSV and PNG are written alongside")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="predict instance masks for a dataset")
    s.add_argument("--model", required=True, help="training run directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--theta", type=float, default=0.3)
    s.add_argument("--event-fraction", type=float, default=1.0)
    s.add_argument("--flow", action="store_true", help="also write the auxiliary flow estimate")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--skip-model", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("viz", parents=[common], help="render a flow field or instance overlay")
    s.add_argument("--out", required=True)
    s.add_argument("--flow")
    s.add_argument("--max-flow", type=float)
    s.add_argument("--scene")
    s.add_argument("--pred")
    s.set_defaults(func=cmd_viz)
    return p


def main(argv=None):
    from .events import EventFormatError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        code = args.func(args)
    except (io.FormatError, EventFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
