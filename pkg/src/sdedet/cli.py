"""
``sdedet`` command line.

Exit codes: 0 success, 1 a check failed, 2 bad input.
``SDE_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import data, metrics, network
from .boxes import Detection, detections_json, format_detections
from .errors import ConfigError, DatasetError, ShapeError, WeightFormatError
from .gradcheck import TOLERANCE, run_gradcheck
from .weights import load_weights, save_weights

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _seed(text: str) -> int:
    v = int(text, 0)
    if not -(2 ** 63) <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed {text} does not fit in 64 bits")
    return v & (2 ** 64 - 1)


def _spec(args) -> network.NetworkSpec:
    if getattr(args, "spec", None):
        try:
            spec = network.NetworkSpec.from_json(Path(args.spec).read_text())
        except (OSError, TypeError, ValueError, KeyError) as exc:
            raise InputError(f"cannot read spec {args.spec}: {exc}") from None
    else:
        spec = network.NetworkSpec()
    if getattr(args, "groups", None) is not None:
        spec = replace(spec, ema_groups=args.groups)
    return spec


def _model(args) -> network.Model:
    spec = _spec(args)
    if getattr(args, "weights", None):
        store = load_weights(args.weights)
    else:
        store = network.init_weights(spec, args.seed)
    return network.build_model(spec, store)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _fmt(shape) -> str:
    return "-" if shape is None else "(" + ",".join(str(v) for v in shape) + ")"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------
def cmd_shapes(args) -> int:
    model = _model(args)
    try:
        rows = network.check_table_shapes(model)
    except ShapeError as exc:
        print(f"forward pass failed: {exc}")
        return EXIT_FAIL
    print(f"{'#':>2}  {'operation':<22} {'expected in':<15} {'expected out':<15} {'got in':<15} {'got out':<15}")
    first_bad = None
    for i, r in enumerate(rows, 1):
        status = "ok" if r.ok else "MISMATCH"
        print(f"{i:>2}  {r.row.operation:<22} {_fmt(r.row.input):<15} {_fmt(r.row.output):<15} "
              f"{_fmt(r.actual_input):<15} {_fmt(r.actual_output):<15} {status}")
        if not r.ok and first_bad is None:
            first_bad = (i, r)
    print(f"parameters: {network.param_count(model)} (sanity band 2.5M-4.5M; neck and head are reconstructions)")
    if first_bad is not None:
        i, r = first_bad
        print(f"first mismatch: row {i} {r.row.operation} ({r.row.source}) expected {_fmt(r.row.output)} "
              f"got {_fmt(r.actual_output)}")
        return EXIT_FAIL
    print(f"all {len(rows)} rows match")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = run_gradcheck(args.seed, groups=args.groups or 2)
    worst = 0.0
    for name, err in errors.items():
        flag = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<12} max rel err {err:.3e}  {flag}")
        worst = max(worst, err)
    return EXIT_OK if worst < TOLERANCE else EXIT_FAIL


def _source_detections(model, image, conf, nms_iou) -> List[Detection]:
    size = model.spec.input_size
    canvas, box = data.letterbox(image, size)
    _, h, w = image.shape
    out = []
    for d in network.detect(model, canvas, conf, nms_iou):
        x0, y0, x1, y1 = box.to_source(d.bbox)
        clipped = (min(max(x0, 0.0), w), min(max(y0, 0.0), h), min(max(x1, 0.0), w), min(max(y1, 0.0), h))
        out.append(Detection(clipped, d.score, d.class_id))
    return out


def cmd_infer(args) -> int:
    model = _model(args)
    image = data.read_image(args.image)
    dets = _source_detections(model, image, args.conf, args.nms_iou)
    _emit(detections_json(dets) + "\n" if args.json else format_detections(dets), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    report = metrics.evaluate_dataset(args.pred_dir, args.gt_dir, args.conf)
    _emit(report.to_json() + "\n", args.out)
    print(f"precision {report.precision:.3f} recall {report.recall:.3f} f1 {report.f1:.3f} "
          f"mAP50 {report.map50:.3f} mAP50-95 {report.map50_95:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_augment(args) -> int:
    samples = data.load_dataset(args.in_dir)
    out = data.augment_dataset(samples)
    data.save_samples(out, args.out_dir)
    print(f"{len(samples)} inputs -> {len(out)} samples written to {args.out_dir}")
    return EXIT_OK


def cmd_split(args) -> int:
    samples = data.load_dataset(args.data_dir)
    train, test = data.split_dataset(samples, args.ratio, args.seed)
    print(f"train {len(train)} test {len(test)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.txt").write_text("".join(s.name + "\n" for s in train))
        (out / "test.txt").write_text("".join(s.name + "\n" for s in test))
    return EXIT_OK


def heat_colors(cam: np.ndarray) -> np.ndarray:
    """Blue (0) through green to red (1), ``[3, H, W]``."""
    return np.stack([cam, 1.0 - np.abs(2.0 * cam - 1.0), 1.0 - cam]).astype(np.float32)


def gradcam_overlay(image: np.ndarray, cam: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Nearest-upsample ``cam`` to the image grid and alpha-blend its colours."""
    _, h, w = image.shape
    up = np.repeat(np.repeat(cam, h // cam.shape[0], axis=0), w // cam.shape[1], axis=1)
    return ((1.0 - alpha) * image + alpha * heat_colors(up)).astype(np.float32)


def cmd_gradcam(args) -> int:
    model = _model(args)
    canvas, _ = data.letterbox(data.read_image(args.image), model.spec.input_size)
    try:
        cam = network.gradcam(model, canvas, args.layer)
    except KeyError as exc:
        raise InputError(exc.args[0]) from None
    out = args.out or "gradcam.ppm"
    data.write_image(out, gradcam_overlay(canvas, cam))
    print(f"{args.layer}: {cam.shape[0]}x{cam.shape[1]} heatmap -> {out} "
          f"({canvas.shape[1]}x{canvas.shape[2]})")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _model(args)
    mean, std = network.benchmark(model, args.reps, args.seed)
    flops = network.estimate_flops(model)
    print(f"forward latency: mean {mean * 1e3:.1f} ms, stddev {std * 1e3:.1f} ms over {args.reps} runs")
    print(f"FLOPs (2 x MACs, conv and matmul only): {flops / 1e9:.2f} G")
    print(f"parameters: {network.param_count(model)}")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    spec = _spec(args)
    store = network.init_weights(spec, args.seed)
    out = args.out or "weights.sdew"
    save_weights(store, out)
    print(f"{len(store)} tensors, {store.num_elements()} parameters -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--out", help="output path (default stdout or a fixed name)")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--weights", help="SDEW weights file; seeded init when omitted")
    model_opts.add_argument("--spec", help="network spec JSON; built-in default when omitted")
    model_opts.add_argument("--groups", type=int, help="EMA channel groups")

    detect_opts = argparse.ArgumentParser(add_help=False)
    detect_opts.add_argument("--conf", type=_unit_interval, default=0.25, help="confidence threshold")
    detect_opts.add_argument("--nms-iou", type=_unit_interval, default=0.7, help="NMS IoU threshold")

    parser = argparse.ArgumentParser(prog="sdedet", description="star/deformable/EMA detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("shapes", parents=[common, model_opts], help="check layer shapes against the table")
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--groups", type=int, help="EMA channel groups (default 2)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infer", parents=[common, model_opts, detect_opts], help="detect objects in an image")
    p.add_argument("image")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text lines")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--conf", type=_unit_interval, default=0.25, help="operating point for P/R/F1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", parents=[common], help="write original plus six augmentations per sample")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", parents=[common], help="seeded train/test split")
    p.add_argument("data_dir")
    p.add_argument("--ratio", type=_unit_interval, default=0.6)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("gradcam", parents=[common, model_opts], help="write a Grad-CAM overlay")
    p.add_argument("image")
    p.add_argument("--layer", default="backbone.c2f1", help="layer name, e.g. backbone.c2f1")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("bench", parents=[common, model_opts], help="forward latency and FLOP estimate")
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("init-weights", parents=[common, model_opts], help="write seeded weights")
    p.set_defaults(func=cmd_init_weights)
    return parser


def _thread_limit():
    value = os.environ.get("SDE_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(value)))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (InputError, DatasetError, WeightFormatError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
