"""End-to-end frame pipeline: detect, classify, mask, measure.

A `Pipeline` holds the loaded models plus smoother state and processes one
frame at a time. `run_stream` drives it over an ordered frame source (a
directory of numbered frames, concatenated binary PPMs on stdin, or a
camera when OpenCV is available) and `bench` times it over an in-memory
frame list, excluding model-load time.

Per-frame failures degrade to pass-through: the offending frame is emitted
unmodified with an error note in its metrics record, and the stream keeps
going. A stream never aborts because one frame was bad.
"""

from __future__ import annotations

import json
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from . import EmomaskError
from .emotion import (
    EmotionLabel,
    Smoother,
    classify,
    load_emoji_set,
    preprocess_face,
)
from .facedetect import (
    FaceBox,
    LinearSvm,
    detect_faces,
    load_svm,
    synthetic_face_chip,
    train_default_detector,
)
from .geometry import (
    FACE_RATIOS,
    KEYPOINT_NAMES,
    Homography,
    KeypointSet,
    estimate_homography,
    proportional_landmarks,
    unit_to_pixels,
    warp_composite,
)
from .imagecore import Channels, Image, read_image, write_image
from .nn import VGG_BA_SMALL, Model, build_model, load_weights


class BadConfig(EmomaskError):
    """Pipeline configuration is malformed or references missing files."""


class SourceUnavailable(EmomaskError):
    """The requested frame source cannot be opened."""


class NoFrames(EmomaskError):
    """A benchmark needs at least one frame and one repeat."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline needs to start, mirroring the JSON config file.

    Paths are kept as given; existence is checked when a `Pipeline` is
    constructed (or by `load_config`), not at dataclass creation, so configs
    can be assembled programmatically before their artifacts exist.
    """

    emoji_dir: str
    weights: str | None = None
    svm: str | None = None
    smooth: bool = False
    smooth_k: int = 5
    stride: int = 8
    pyramid_step: float = 1.2
    nms_iou: float = 0.3
    min_face: int = 80
    landmark_ratios: dict | None = None
    boxes: str | None = None
    out_dir: str | None = None
    metrics: str | None = None

    def __post_init__(self):
        if self.smooth_k < 1:
            raise BadConfig(f"smoother window k must be >= 1, got {self.smooth_k}")
        if self.pyramid_step <= 1.0:
            raise BadConfig("pyramid_step must be > 1")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise BadConfig("nms_iou must lie in [0, 1]")
        if self.landmark_ratios is not None:
            missing = set(KEYPOINT_NAMES) - set(self.landmark_ratios)
            extra = set(self.landmark_ratios) - set(KEYPOINT_NAMES)
            if missing or extra:
                raise BadConfig(
                    f"landmark_ratios must name exactly {sorted(KEYPOINT_NAMES)}"
                )


_CONFIG_KEYS = (
    "emoji_dir",
    "weights",
    "svm",
    "smooth",
    "smooth_k",
    "stride",
    "pyramid_step",
    "nms_iou",
    "min_face",
    "landmark_ratios",
    "boxes",
    "out_dir",
    "metrics",
)


def load_config(path) -> PipelineConfig:
    """Parse a JSON config file and verify its referenced inputs exist."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BadConfig(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise BadConfig("config root must be a JSON object")
    unknown = set(raw) - set(_CONFIG_KEYS)
    if unknown:
        raise BadConfig(f"unknown config keys: {sorted(unknown)}")
    if "emoji_dir" not in raw:
        raise BadConfig("config must set emoji_dir")
    if raw.get("landmark_ratios") is not None:
        ratios = raw["landmark_ratios"]
        if not isinstance(ratios, dict) or any(
            not isinstance(v, (list, tuple)) or len(v) != 2 for v in ratios.values()
        ):
            raise BadConfig("landmark_ratios must map names to [rx, ry] pairs")
        raw["landmark_ratios"] = {k: (float(v[0]), float(v[1])) for k, v in ratios.items()}
    cfg = PipelineConfig(**raw)
    _check_inputs_exist(cfg)
    return cfg


def _check_inputs_exist(cfg: PipelineConfig) -> None:
    # Referenced input files must exist at startup; out_dir and metrics are
    # outputs and get created on demand.
    if not Path(cfg.emoji_dir).is_dir():
        raise BadConfig(f"emoji_dir does not exist: {cfg.emoji_dir}")
    for name in ("weights", "svm", "boxes"):
        value = getattr(cfg, name)
        if value is not None and not Path(value).is_file():
            raise BadConfig(f"{name} file does not exist: {value}")


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class FrameMetrics:
    """Per-frame timing and outcome record.

    `homography` is debugging plumbing (the transform actually used for the
    composite); it is omitted from the JSON serialization.
    """

    index: int
    detect_ms: float
    classify_ms: float
    mask_ms: float
    total_ms: float
    label: EmotionLabel | None
    box: FaceBox | None
    note: str | None = None
    homography: Homography | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        stages = (self.detect_ms, self.classify_ms, self.mask_ms)
        if any(s < 0 for s in stages) or self.total_ms + 1e-6 < max(stages):
            raise ValueError("total_ms must cover every stage")

    def to_json(self) -> str:
        rec = {
            "frame": self.index,
            "detect_ms": round(self.detect_ms, 4),
            "classify_ms": round(self.classify_ms, 4),
            "mask_ms": round(self.mask_ms, 4),
            "total_ms": round(self.total_ms, 4),
            "label": self.label.label_name if self.label is not None else None,
            "box": None,
            "note": self.note,
        }
        if self.box is not None:
            b = self.box
            rec["box"] = [b.x, b.y, b.w, b.h, b.score]
        return json.dumps(rec)


def _ms(since: float) -> float:
    return (time.perf_counter() - since) * 1000.0


def _as_rgb(img: Image) -> Image:
    """RGB view of a frame for the compositor; video alpha is vestigial."""
    if img.channels is Channels.RGB3:
        return img
    if img.channels is Channels.GRAY1:
        return Image(img.pixels.repeat(3, axis=2))
    return Image(np.ascontiguousarray(img.pixels[:, :, :3]))


# ---------------------------------------------------------------------------
# the pipeline proper


class Pipeline:
    """One pipeline instance per stream; two instances are independent.

    Models are loaded once in the constructor so that steady-state frame
    times never include load time. Keyword overrides let tests inject
    in-memory models without touching the filesystem.
    """

    def __init__(
        self,
        config: PipelineConfig,
        *,
        model: Model | None = None,
        svm: LinearSvm | None = None,
        emoji: dict[EmotionLabel, tuple[Image, KeypointSet]] | None = None,
    ):
        if emoji is None or (model is None and config.weights) or (svm is None and config.svm):
            _check_inputs_exist(config)
        self.config = config
        if model is None:
            model = (
                load_weights(config.weights, VGG_BA_SMALL)
                if config.weights
                else build_model(VGG_BA_SMALL)
            )
        if svm is None:
            svm = load_svm(config.svm) if config.svm else train_default_detector()
        if emoji is None:
            emoji = load_emoji_set(config.emoji_dir)
        self.model = model
        self.svm = svm
        self.ratios = dict(config.landmark_ratios or FACE_RATIOS)
        self.smoother = Smoother(config.smooth_k) if config.smooth else None
        # Pre-scale each emoji's unit keypoints to its pixel grid; they are
        # the homography source points for every composite.
        self.emoji = {
            lab: (img, unit_to_pixels(kps, img.width, img.height))
            for lab, (img, kps) in emoji.items()
        }
        self._next_index = 0

    def reset(self) -> None:
        """Clear smoother state and frame numbering before a new stream."""
        if self.smoother is not None:
            self.smoother.reset()
        self._next_index = 0

    def process_frame(
        self, frame: Image, index: int | None = None, box: FaceBox | None = None
    ) -> tuple[Image, FrameMetrics]:
        """Run detect -> classify -> mask on one frame.

        An externally supplied `box` skips detection. With no face the frame
        passes through bit-identical with label None; any module error in a
        stage likewise degrades to pass-through, recorded in `note`.

        Gray or RGBA frames are accepted; a composite is rendered onto an
        RGB widening of the frame (pass-through still returns the original
        object untouched).
        """
        if index is None:
            index = self._next_index
        self._next_index = index + 1

        t_frame = time.perf_counter()
        detect_ms = classify_ms = mask_ms = 0.0
        label: EmotionLabel | None = None
        note: str | None = None
        hmg: Homography | None = None
        out = frame

        if box is None:
            t = time.perf_counter()
            try:
                found = detect_faces(
                    frame,
                    self.svm,
                    stride=self.config.stride,
                    nms_iou=self.config.nms_iou,
                    scale_step=self.config.pyramid_step,
                    min_size=self.config.min_face,
                )
                box = found[0] if found else None
            except EmomaskError as exc:
                note = f"detect: {type(exc).__name__}: {exc}"
            detect_ms = _ms(t)

        if box is not None and note is None:
            t = time.perf_counter()
            try:
                tensor = preprocess_face(frame, box)
                _, label = classify(self.model, tensor)
                if self.smoother is not None:
                    label = self.smoother.push(label)
            except EmomaskError as exc:
                note = f"classify: {type(exc).__name__}: {exc}"
                label = None
            classify_ms = _ms(t)

        if label is not None:
            t = time.perf_counter()
            try:
                emoji_img, emoji_kps = self.emoji[label]
                dst = proportional_landmarks(box, self.ratios)
                hmg = estimate_homography(emoji_kps, dst)
                out = warp_composite(_as_rgb(frame), emoji_img, hmg)
            except EmomaskError as exc:
                note = f"mask: {type(exc).__name__}: {exc}"
                hmg = None
                out = frame
            mask_ms = _ms(t)

        total_ms = max(_ms(t_frame), detect_ms, classify_ms, mask_ms)
        metrics = FrameMetrics(
            index, detect_ms, classify_ms, mask_ms, total_ms, label, box, note, hmg
        )
        return out, metrics


# ---------------------------------------------------------------------------
# frame sources


def _natural_key(name: str):
    # "frame2" sorts before "frame10"; mixed runs compare type-tagged.
    parts = re.split(r"(\d+)", name)
    return tuple((1, int(p)) if p.isdigit() else (0, p) for p in parts if p)


_FRAME_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}


def _dir_frames(path: Path) -> Iterator[tuple[str, Image | None, str | None]]:
    files = sorted(
        (p for p in path.iterdir() if p.suffix.lower() in _FRAME_SUFFIXES),
        key=lambda p: _natural_key(p.name),
    )
    for p in files:
        try:
            yield p.name, read_image(p), None
        except (EmomaskError, OSError, ValueError) as exc:
            yield p.name, None, f"read: {type(exc).__name__}: {exc}"


def _read_exact(stream: IO[bytes], n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise SourceUnavailable(f"truncated PPM payload: {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _pnm_token(stream: IO[bytes]) -> bytes | None:
    """Next whitespace-delimited header token, skipping '#' comments.

    Consumes the single whitespace byte that terminates the token, leaving
    the stream positioned at the next token or at binary payload. Returns
    None at a clean end of stream.
    """
    tok = b""
    while True:
        c = stream.read(1)
        if not c:
            return tok or None
        if c == b"#" and not tok:
            while c and c != b"\n":
                c = stream.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def _ppm_stream(stream: IO[bytes]) -> Iterator[tuple[str, Image | None, str | None]]:
    """Frames from concatenated binary PPMs (P6), e.g. piped on stdin."""
    idx = 0
    while True:
        magic = _pnm_token(stream)
        if magic is None:
            return
        if magic != b"P6":
            raise SourceUnavailable(f"expected P6 stream, got {magic!r}")
        try:
            w = int(_pnm_token(stream) or b"")
            h = int(_pnm_token(stream) or b"")
            maxval = int(_pnm_token(stream) or b"")
        except ValueError as exc:
            raise SourceUnavailable(f"bad PPM header in stream: {exc}") from exc
        if maxval != 255:
            raise SourceUnavailable(f"only maxval 255 supported, got {maxval}")
        payload = _read_exact(stream, w * h * 3)
        px = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
        yield f"frame_{idx:05d}.ppm", Image(px.copy()), None
        idx += 1


def _camera_frames(spec: str) -> Iterator[tuple[str, Image | None, str | None]]:
    try:
        import cv2
    except ImportError as exc:
        raise SourceUnavailable("camera input requires OpenCV (cv2)") from exc
    cam_index = int(spec.split(":", 1)[1]) if ":" in spec else 0
    cap = cv2.VideoCapture(cam_index)
    if not cap.isOpened():
        raise SourceUnavailable(f"cannot open camera {cam_index}")
    idx = 0
    try:
        while True:
            ok, bgr = cap.read()
            if not ok:
                return
            rgb = np.ascontiguousarray(bgr[:, :, ::-1])
            yield f"frame_{idx:05d}.png", Image(rgb), None
            idx += 1
    finally:
        cap.release()


def open_source(source) -> Iterator[tuple[str, Image | None, str | None]]:
    """Resolve a source spec into (name, image, error_note) triples.

    `source` is "-" for stdin PPMs, "camera" or "camera:N" for a capture
    device, or a directory of numbered frame files. Unreadable files inside
    a directory yield an error note instead of aborting the stream.
    """
    if isinstance(source, str) and source == "-":
        return _ppm_stream(sys.stdin.buffer)
    if isinstance(source, str) and source.startswith("camera"):
        return _camera_frames(source)
    path = Path(source)
    if path.is_dir():
        return _dir_frames(path)
    raise SourceUnavailable(
        f"source must be a frame directory, '-', or camera[:N]; got {source!r}"
    )


def read_boxes_file(path) -> dict[int, FaceBox]:
    """Parse external detections: one `frame_index x y w h` per line.

    Blank lines and '#' comments are ignored; a repeated index keeps the
    last line. External boxes carry score 0.
    """
    out: dict[int, FaceBox] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise BadConfig(f"boxes line {ln}: expected 'frame_index x y w h'")
        try:
            idx = int(parts[0])
            x, y, w, h = (float(v) for v in parts[1:])
            out[idx] = FaceBox(x, y, w, h, 0.0)
        except ValueError as exc:
            raise BadConfig(f"boxes line {ln}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# streaming and benchmarking


def _stage_stats(values: np.ndarray) -> dict[str, float]:
    return {
        "mean": float(values.mean()),
        "min": float(values.min()),
        "p95": float(np.percentile(values, 95.0)),
    }


def _summary_lines(metrics: list[FrameMetrics]) -> list[str]:
    lines = [f"frames: {len(metrics)}"]
    if not metrics:
        return lines
    for stage in ("detect", "classify", "mask", "total"):
        vals = np.array([getattr(m, f"{stage}_ms") for m in metrics])
        s = _stage_stats(vals)
        lines.append(
            f"{stage:<9} mean {s['mean']:8.2f} ms   min {s['min']:8.2f} ms   "
            f"p95 {s['p95']:8.2f} ms"
        )
    mean_total = float(np.mean([m.total_ms for m in metrics]))
    if mean_total > 0.0:
        lines.append(f"fps: {1000.0 / mean_total:.2f}")
    return lines


def _out_name(name: str, img: Image) -> str:
    # Masking can widen a gray source frame to RGB; keep the source name
    # when its suffix can hold the result, otherwise fall back to PNG.
    suffix = Path(name).suffix.lower()
    if img.channels is Channels.RGB3 and suffix in {".ppm", ".png"}:
        return name
    if img.channels is Channels.GRAY1 and suffix in {".pgm", ".png"}:
        return name
    if img.channels is Channels.RGBA4 and suffix == ".png":
        return name
    return Path(name).stem + ".png"


def run_stream(
    pipeline: Pipeline,
    source,
    *,
    max_frames: int | None = None,
    log: IO[str] | None = None,
) -> int:
    """Mask every frame of an ordered source; returns the process exit code.

    Output frames (when `out_dir` is configured) keep source order and
    names; one metrics record is appended per frame when `metrics` is
    configured; a summary is printed at the end. Per-frame errors are
    logged and the stream continues.
    """
    cfg = pipeline.config
    log = log if log is not None else sys.stderr
    pipeline.reset()
    boxes = read_boxes_file(cfg.boxes) if cfg.boxes else {}
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics_fh = open(cfg.metrics, "a") if cfg.metrics else None

    collected: list[FrameMetrics] = []
    try:
        for idx, (name, frame, err) in enumerate(open_source(source)):
            if max_frames is not None and idx >= max_frames:
                break
            if frame is None:
                metrics = FrameMetrics(idx, 0.0, 0.0, 0.0, 0.0, None, None, err)
                print(f"frame {idx} ({name}): {err}", file=log)
            else:
                try:
                    masked, metrics = pipeline.process_frame(frame, idx, boxes.get(idx))
                except Exception as exc:  # containment of last resort
                    masked = frame
                    metrics = FrameMetrics(
                        idx, 0.0, 0.0, 0.0, 0.0, None, None,
                        f"{type(exc).__name__}: {exc}",
                    )
                if metrics.note:
                    print(f"frame {idx} ({name}): {metrics.note}", file=log)
                if out_dir is not None:
                    write_image(out_dir / _out_name(name, masked), masked)
            collected.append(metrics)
            if metrics_fh is not None:
                metrics_fh.write(metrics.to_json() + "\n")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    print("\n".join(_summary_lines(collected)))
    return 0


@dataclass(frozen=True)
class BenchReport:
    """Per-stage latency samples for one benchmark run."""

    detect_ms: np.ndarray
    classify_ms: np.ndarray
    mask_ms: np.ndarray
    total_ms: np.ndarray

    STAGES = ("detect", "classify", "mask", "total")

    def stage(self, name: str) -> np.ndarray:
        if name not in self.STAGES:
            raise KeyError(name)
        return getattr(self, f"{name}_ms")

    def stats(self) -> dict[str, dict[str, float]]:
        return {name: _stage_stats(self.stage(name)) for name in self.STAGES}

    @property
    def fps(self) -> float:
        return 1000.0 / float(self.total_ms.mean())

    def summary(self) -> str:
        lines = [f"samples: {len(self.total_ms)}"]
        for name, s in self.stats().items():
            lines.append(
                f"{name:<9} mean {s['mean']:8.2f} ms   min {s['min']:8.2f} ms   "
                f"p95 {s['p95']:8.2f} ms"
            )
        lines.append(f"fps: {self.fps:.2f}")
        return "\n".join(lines)


def bench(pipeline: Pipeline, frames: Iterable[Image], repeats: int = 1) -> BenchReport:
    """Time `process_frame` over `frames`, `repeats` passes.

    Model loading happened at `Pipeline` construction and is deliberately
    outside the timed region. One sample per stage per frame per repeat.
    """
    frames = list(frames)
    if not frames or repeats < 1:
        raise NoFrames(f"need >= 1 frame and >= 1 repeat, got {len(frames)}, {repeats}")
    pipeline.reset()
    samples: list[FrameMetrics] = []
    for _ in range(repeats):
        for frame in frames:
            _, m = pipeline.process_frame(frame, index=len(samples))
            samples.append(m)
    return BenchReport(
        detect_ms=np.array([m.detect_ms for m in samples]),
        classify_ms=np.array([m.classify_ms for m in samples]),
        mask_ms=np.array([m.mask_ms for m in samples]),
        total_ms=np.array([m.total_ms for m in samples]),
    )


def synthetic_frames(
    count: int,
    width: int = 1280,
    height: int = 720,
    seed: int = 0,
    face_size: int = 96,
) -> list[Image]:
    """Benchmark fodder: noisy frames, each with one planted synthetic face."""
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(count):
        bg = rng.normal(110.0, 6.0, size=(height, width))
        frame = np.clip(bg, 0, 255).astype(np.uint8)[:, :, None].repeat(3, axis=2)
        chip = synthetic_face_chip(rng, face_size).pixels[:, :, 0]
        x = int(rng.integers(0, width - face_size))
        y = int(rng.integers(0, height - face_size))
        frame[y : y + face_size, x : x + face_size] = chip[:, :, None]
        frames.append(Image(frame))
    return frames
