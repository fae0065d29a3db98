"""Command line front end.

`run` and `bench` drive the full pipeline from a JSON config; `detect`,
`classify`, and `mask` are single-stage debugging commands wired from
flags; `train-svm` fits a detector from chip directories and `make-emoji`
writes the built-in emoji set to disk.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import EmomaskError
from .emojigen import generate_emoji_set
from .emotion import EmotionLabel, classify, load_emoji_set, preprocess_face
from .facedetect import (
    FaceBox,
    HogParams,
    detect_faces,
    hog_descriptor,
    load_svm,
    save_svm,
    train_default_detector,
    train_linear_svm,
)
from .imagecore import read_image, write_image
from .nn import VGG_BA_SMALL, build_model, load_weights
from .pipeline import (
    Pipeline,
    PipelineConfig,
    bench,
    load_config,
    open_source,
    run_stream,
    synthetic_frames,
)
from .report import write_bench_report


def _parse_box(text: str) -> FaceBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("box must be 'x,y,w,h'")
    try:
        x, y, w, h = (float(p) for p in parts)
        return FaceBox(x, y, w, h, 0.0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _load_model(weights: str | None):
    if weights is None:
        print("note: no --weights given, using untrained zero weights", file=sys.stderr)
        return build_model(VGG_BA_SMALL)
    return load_weights(weights, VGG_BA_SMALL)


def _load_svm_arg(path: str | None):
    if path is None:
        print("note: no --svm given, training the built-in detector", file=sys.stderr)
        return train_default_detector()
    return load_svm(path)


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.boxes is not None:
        overrides["boxes"] = args.boxes
    if args.metrics is not None:
        overrides["metrics"] = args.metrics
    if args.smooth:
        overrides["smooth"] = True
    if overrides:
        cfg = replace(cfg, **overrides)
    pipeline = Pipeline(cfg)
    return run_stream(pipeline, args.input, max_frames=args.max_frames)


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    pipeline = Pipeline(cfg)
    if args.frames is not None:
        frames = []
        for name, img, err in open_source(args.frames):
            if img is None:
                print(f"skipping {name}: {err}", file=sys.stderr)
            else:
                frames.append(img)
    else:
        frames = synthetic_frames(args.synthetic, seed=args.seed)
    report = bench(pipeline, frames, repeats=args.repeats)
    print(report.summary())
    out_dir = Path(args.report_dir)
    for path in write_bench_report(report, out_dir):
        print(f"wrote {path}")
    return 0


def _cmd_detect(args) -> int:
    img = read_image(args.image)
    svm = _load_svm_arg(args.svm)
    boxes = detect_faces(
        img,
        svm,
        stride=args.stride,
        nms_iou=args.nms_iou,
        scale_step=args.pyramid_step,
        min_size=args.min_face,
    )
    for b in boxes:
        print(f"{b.x:.1f} {b.y:.1f} {b.w:.1f} {b.h:.1f} {b.score:.4f}")
    print(f"{len(boxes)} detection(s)", file=sys.stderr)
    return 0


def _cmd_classify(args) -> int:
    img = read_image(args.image)
    model = _load_model(args.weights)
    box = args.box
    if box is None:
        found = detect_faces(img, _load_svm_arg(args.svm))
        if not found:
            print("no face detected", file=sys.stderr)
            return 1
        box = found[0]
    scores, label = classify(model, preprocess_face(img, box))
    print(label.label_name)
    for lab in EmotionLabel:
        print(f"  {lab.label_name:<9} {scores.probs[lab]:.4f}", file=sys.stderr)
    return 0


def _cmd_mask(args) -> int:
    cfg = PipelineConfig(
        emoji_dir=args.emoji_dir,
        weights=args.weights,
        svm=args.svm,
    )
    pipeline = Pipeline(cfg)
    img = read_image(args.image)
    masked, metrics = pipeline.process_frame(img, box=args.box)
    write_image(args.out, masked)
    label = metrics.label.label_name if metrics.label is not None else "none"
    print(f"label: {label}")
    if metrics.note:
        print(f"note: {metrics.note}", file=sys.stderr)
    return 0


def _chip_descriptors(directory: Path, params: HogParams) -> np.ndarray:
    files = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in {".png", ".pgm", ".ppm"}
    )
    if not files:
        raise EmomaskError(f"no chip images in {directory}")
    return np.stack([hog_descriptor(read_image(p), params) for p in files])


def _cmd_train_svm(args) -> int:
    params = HogParams()
    pos = _chip_descriptors(Path(args.pos), params)
    neg = _chip_descriptors(Path(args.neg), params)
    svm = train_linear_svm(pos, neg, epochs=args.epochs, seed=args.seed)
    save_svm(args.out, svm)
    print(f"wrote {args.out}: {len(pos)} pos / {len(neg)} neg chips, "
          f"final objective {svm.objective_curve[-1]:.6f}")
    return 0


def _cmd_make_emoji(args) -> int:
    paths = generate_emoji_set(args.out, size=args.size)
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emomask", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="mask a frame stream")
    run.add_argument("--config", required=True)
    run.add_argument("--in", dest="input", default="camera",
                     help="frame directory, '-' for stdin PPMs, or camera[:N]")
    run.add_argument("--out", help="output frame directory (overrides config)")
    run.add_argument("--boxes", help="external detections file (overrides config)")
    run.add_argument("--metrics", help="metrics JSONL path (overrides config)")
    run.add_argument("--smooth", action="store_true",
                     help="enable the majority-vote smoother")
    run.add_argument("--max-frames", type=int, default=None)
    run.set_defaults(fn=_cmd_run)

    bn = sub.add_parser("bench", help="time the pipeline and write a report")
    bn.add_argument("--config", required=True)
    src = bn.add_mutually_exclusive_group(required=True)
    src.add_argument("--frames", help="directory of benchmark frames")
    src.add_argument("--synthetic", type=int, metavar="N",
                     help="generate N synthetic 720p frames instead")
    bn.add_argument("--repeats", type=int, default=1)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--report-dir", default="bench_report")
    bn.set_defaults(fn=_cmd_bench)

    det = sub.add_parser("detect", help="print face boxes for one image")
    det.add_argument("--image", required=True)
    det.add_argument("--svm")
    det.add_argument("--stride", type=int, default=8)
    det.add_argument("--min-face", type=int, default=80)
    det.add_argument("--nms-iou", type=float, default=0.3)
    det.add_argument("--pyramid-step", type=float, default=1.2)
    det.set_defaults(fn=_cmd_detect)

    cls = sub.add_parser("classify", help="print the expression label for one image")
    cls.add_argument("--image", required=True)
    cls.add_argument("--weights")
    cls.add_argument("--svm")
    cls.add_argument("--box", type=_parse_box, help="skip detection: 'x,y,w,h'")
    cls.set_defaults(fn=_cmd_classify)

    msk = sub.add_parser("mask", help="mask a single image")
    msk.add_argument("--image", required=True)
    msk.add_argument("--out", required=True)
    msk.add_argument("--emoji-dir", required=True)
    msk.add_argument("--weights")
    msk.add_argument("--svm")
    msk.add_argument("--box", type=_parse_box)
    msk.set_defaults(fn=_cmd_mask)

    tr = sub.add_parser("train-svm", help="train a detector from chip directories")
    tr.add_argument("--pos", required=True, help="directory of 64x64 face chips")
    tr.add_argument("--neg", required=True, help="directory of 64x64 negative chips")
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--epochs", type=int, default=50)
    tr.set_defaults(fn=_cmd_train_svm)

    em = sub.add_parser("make-emoji", help="write the built-in emoji set")
    em.add_argument("--out", required=True)
    em.add_argument("--size", type=int, default=128)
    em.set_defaults(fn=_cmd_make_emoji)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EmomaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
