"""Command-line surface: detect, eval, verify, train-toy.

Exit codes: 0 success, 1 runtime failure (bad files, failed checks),
2 usage error (bad flags or argument combinations). All randomized behavior
is seeded through --seed (default from $YOLOKIT_SEED, else 0), so identical
invocations produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .cfg import builtin_graph, parse_cfg
from .detect import decode, letterbox, nms
from .errors import UsageError, YoloKitError
from .evaluation import (
    VISDRONE_CLASS_NAMES,
    evaluate,
    format_predictions,
    format_report_table,
    load_ground_truth,
    parse_predictions,
    write_report_files,
)
from .loss import ToyTrainConfig, synthetic_dataset, toy_graph, train_toy
from .ppm import PALETTE, read_ppm, render_detections, write_ppm
from .verify import run_all
from .weights import load_weights_file, random_init

_PALETTE_DOC = ", ".join(f"{i}:{rgb}" for i, rgb in enumerate(PALETTE))


def _default_seed() -> int:
    try:
        return int(os.environ.get("YOLOKIT_SEED", "0"))
    except ValueError:
        return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yolokit",
        description="Desk-scale one-stage detector kit: detect, evaluate, verify.",
    )
    parser.add_argument("--version", action="version", version=f"yolokit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    det = sub.add_parser(
        "detect",
        help="run a model on P6 PPM images and write a prediction file",
        description=(
            "Runs the detector on binary P6 PPM images. Rendered outputs use a "
            f"fixed 10-color class palette (class:RGB): {_PALETTE_DOC}."
        ),
    )
    det.add_argument("images", nargs="+", help="input images (binary P6 PPM)")
    det.add_argument("--model", choices=["yolov3", "yolov3-spp", "yolov3-tiny"],
                     help="builtin model variant")
    det.add_argument("--cfg", help="model definition file (overrides --model)")
    det.add_argument("--classes", type=int, default=80,
                     help="class count for builtin models (default 80)")
    det.add_argument("--weights", help="binary weights file; omit for seeded random init")
    det.add_argument("--size", type=int, default=640, help="square input size (default 640)")
    det.add_argument("--conf", type=float, default=0.25,
                     help="confidence threshold (default 0.25)")
    det.add_argument("--nms", type=float, default=0.45,
                     help="NMS IoU threshold (default 0.45)")
    det.add_argument("--out", default="predictions.txt", help="prediction file to write")
    det.add_argument("--render", metavar="DIR",
                     help="also write box-rendered PPM copies into DIR")
    det.add_argument("--precision", choices=["double", "single"], default="double",
                     help="compute precision (default double)")
    det.add_argument("--seed", type=int, default=None, help="random-init seed")

    ev = sub.add_parser("eval", help="score a prediction file against ground truth")
    ev.add_argument("--gt", required=True, help="directory of per-image annotation .txt files")
    ev.add_argument("--pred", required=True, help="prediction file")
    ev.add_argument("--classes", type=int, default=10, help="class count (default 10)")
    ev.add_argument("--iou", type=float, default=0.5,
                    help="matching IoU threshold (default 0.5)")
    ev.add_argument("--conf", type=float, default=None,
                    help="only score detections at or above this confidence")
    ev.add_argument("--out-dir", default="eval_out",
                    help="directory for the table, CSV and PR curves (default eval_out)")

    ver = sub.add_parser("verify", help="run the full self-verification battery")
    ver.add_argument("--json", action="store_true", help="machine-readable results")
    ver.add_argument("--seed", type=int, default=None)
    ver.add_argument("--toy-steps", type=int, default=200,
                     help="training steps for the toy gate (default 200)")
    # sensitivity probe: perturbs one analytic gradient so the check must fail
    ver.add_argument("--inject-grad-fault", type=float, default=0.0,
                     help=argparse.SUPPRESS)

    toy = sub.add_parser("train-toy", help="train the micro-model on synthetic data")
    toy.add_argument("--steps", type=int, default=200)
    toy.add_argument("--seed", type=int, default=None)
    toy.add_argument("--out", default="toy_loss.csv", help="loss-history CSV to write")
    return parser


def _resolve_graph(args):
    if args.cfg:
        with open(args.cfg, encoding="utf-8") as fh:
            return parse_cfg(fh.read())
    if not args.model:
        raise UsageError("pick a model with --model or supply --cfg")
    if args.classes < 1:
        raise UsageError("--classes must be >= 1")
    return builtin_graph(args.model.replace("-", "_"), args.classes)


def cmd_detect(args) -> int:
    if args.size % 32:
        raise UsageError(f"--size {args.size} must be divisible by 32")
    if not 0 <= args.conf < 1:
        raise UsageError("--conf must be in [0, 1)")
    if not 0 < args.nms < 1:
        raise UsageError("--nms must be in (0, 1)")
    graph = _resolve_graph(args)
    dtype = np.float64 if args.precision == "double" else np.float32
    seed = args.seed if args.seed is not None else _default_seed()
    if args.weights:
        net = load_weights_file(graph, args.weights, dtype=dtype)
    else:
        net = random_init(graph, seed=seed, dtype=dtype)

    all_detections = []
    for path in args.images:
        image_id = os.path.splitext(os.path.basename(path))[0]
        image = read_ppm(path)
        boxed, transform = letterbox(image, args.size)
        heads = net.forward(boxed.astype(dtype))
        detections = []
        for head in heads:
            detections.extend(decode(head, args.conf, transform, image_id))
        detections = nms(detections, args.nms)
        all_detections.extend(detections)
        if args.render:
            os.makedirs(args.render, exist_ok=True)
            rendered = render_detections(image, detections)
            write_ppm(os.path.join(args.render, f"{image_id}.ppm"), rendered)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(format_predictions(all_detections))
    print(f"{len(all_detections)} detections -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    if not 0 < args.iou < 1:
        raise UsageError("--iou must be in (0, 1)")
    truth = load_ground_truth(args.gt)
    with open(args.pred, encoding="utf-8") as fh:
        detections = parse_predictions(fh.read())
    report = evaluate(detections, truth, args.classes,
                      iou_threshold=args.iou, score_threshold=args.conf)
    names = VISDRONE_CLASS_NAMES if args.classes == 10 else None
    write_report_files(report, args.out_dir, names)
    print(format_report_table(report, names), end="")
    print(f"mAP50 {report.map_percent:.1f}")
    return 0


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    results = run_all(seed=seed, fault=args.inject_grad_fault, toy_steps=args.toy_steps)
    if args.json:
        print(json.dumps(
            [
                {
                    "name": r.name,
                    "passed": r.passed,
                    "measured": r.measured,
                    "limit": r.limit,
                    "seconds": round(r.seconds, 3),
                }
                for r in results
            ],
            indent=2,
        ))
    else:
        for r in results:
            print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_train_toy(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    seed = args.seed if args.seed is not None else _default_seed()
    dataset = synthetic_dataset(seed=seed)
    graph = toy_graph()
    history = train_toy(dataset, graph, ToyTrainConfig(steps=args.steps, seed=seed))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, value in enumerate(history):
            fh.write(f"{step},{value!r}\n")
    if history:
        print(f"loss {history[0]:.4f} -> {history[-1]:.4f} over {len(history)} steps")
    else:
        print("no steps run")
    return 0


_COMMANDS = {
    "detect": cmd_detect,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "train-toy": cmd_train_toy,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (YoloKitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
