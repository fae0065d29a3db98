"""Frontal face detection: HoG features, a linear SVM over a sliding window
and image pyramid, greedy non-maximum suppression, and a Pegasos-style
trainer.

The detector ships untrained. A synthetic chip generator provides a bundled
sample set good enough for the test oracles and demos; real data can be
supplied through the same trainer. Downstream stages also accept externally
provided face boxes, so nothing below depends on detector quality.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import BadMagic, EmomaskError, VersionUnsupported
from .imagecore import Channels, Image, resize_bilinear, to_grayscale


class ImageTooSmall(EmomaskError):
    pass


class SizeMismatch(EmomaskError):
    pass


class UntrainedModel(EmomaskError):
    """SVM weight length does not match the descriptor the params produce."""


class EmptyClass(EmomaskError):
    pass


class DimensionMismatch(EmomaskError):
    pass


class NonFiniteModel(EmomaskError):
    pass


class CorruptModelFile(EmomaskError):
    pass


@dataclass(frozen=True)
class HogParams:
    """Dalal-Triggs defaults: 8px cells, 2x2-cell blocks at 1-cell stride,
    9 unsigned bins over [0, 180), 64px square window, L2-Hys clip 0.2."""

    cell_size: int = 8
    block_cells: int = 2
    bins: int = 9
    window: int = 64
    clip: float = 0.2

    def __post_init__(self):
        if self.window % self.cell_size != 0:
            raise ValueError("window must be a multiple of cell_size")

    @property
    def cells_per_window(self) -> int:
        return self.window // self.cell_size

    @property
    def blocks_per_window(self) -> int:
        return self.cells_per_window - (self.block_cells - 1)

    @property
    def descriptor_length(self) -> int:
        return self.blocks_per_window**2 * self.block_cells**2 * self.bins


@dataclass(frozen=True)
class FaceBox:
    x: float
    y: float
    w: float
    h: float
    score: float = 0.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box dimensions must be positive")

    def as_int(self) -> tuple[int, int, int, int]:
        return (
            int(math.floor(self.x + 0.5)),
            int(math.floor(self.y + 0.5)),
            int(math.floor(self.w + 0.5)),
            int(math.floor(self.h + 0.5)),
        )


def iou(a: FaceBox, b: FaceBox) -> float:
    x0 = max(a.x, b.x)
    y0 = max(a.y, b.y)
    x1 = min(a.x + a.w, b.x + b.w)
    y1 = min(a.y + a.h, b.y + b.h)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    inter = (x1 - x0) * (y1 - y0)
    return inter / (a.w * a.h + b.w * b.h - inter)


@dataclass(frozen=True)
class LinearSvm:
    weights: np.ndarray
    bias: float
    threshold: float = 0.0
    objective_curve: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        if w.ndim != 1:
            raise DimensionMismatch("weights must be a vector")
        if not (np.all(np.isfinite(w)) and math.isfinite(self.bias)):
            raise NonFiniteModel("SVM weights/bias must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


# --- HoG ---------------------------------------------------------------------


def _diffs(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """[-1, 0, 1] central differences, one-sided at the borders."""
    dx = np.empty_like(f)
    dx[:, 1:-1] = f[:, 2:] - f[:, :-2]
    dx[:, 0] = f[:, 1] - f[:, 0]
    dx[:, -1] = f[:, -1] - f[:, -2]
    dy = np.empty_like(f)
    dy[1:-1, :] = f[2:, :] - f[:-2, :]
    dy[0, :] = f[1, :] - f[0, :]
    dy[-1, :] = f[-1, :] - f[-2, :]
    return dx, dy


def _mag_angle(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient magnitude and angle folded to [0, pi]. The fold is a
    conditional add, not fmod: fmod is an order of magnitude slower and this
    is the detector's hottest loop."""
    dx, dy = _diffs(f)
    mag = np.sqrt(dx * dx + dy * dy)
    ang = np.arctan2(dy, dx)
    ang = np.where(ang < 0, ang + np.float32(math.pi), ang)
    return mag, ang


def gradients(img: Image) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and orientation (degrees in [0, 180)) from [-1, 0, 1]
    central differences; one-sided at the borders."""
    if img.channels is not Channels.GRAY1:
        raise ValueError("gradients wants a Gray1 image")
    if img.height < 3 or img.width < 3:
        raise ImageTooSmall("need at least 3x3 pixels for central differences")
    mag, ang = _mag_angle(img.pixels[:, :, 0].astype(np.float32))
    ori = np.degrees(ang)
    ori[ori >= 180.0] = 0.0
    return mag, ori


def _cell_histograms(mag, ang, cell: int, bins: int) -> np.ndarray:
    """(ch, cw, bins) orientation histograms; each vote splits linearly
    between the two nearest bin centers (centers at (k + 0.5) * pi/bins).

    Votes land in bins+2 scratch slots per cell and the two overflow slots
    fold back afterwards; that replaces two full-image modular `where`
    passes with a cheap per-cell fixup.
    """
    h, w = mag.shape
    ch, cw = h // cell, w // cell
    mag = mag[: ch * cell, : cw * cell]
    ang = ang[: ch * cell, : cw * cell]
    # shift by one bin so the slot index is never negative: slot = bin + 1
    f = ang * np.float32(bins / math.pi) + np.float32(0.5)
    b0 = f.astype(np.int32)  # truncation == floor: f >= 0.5
    w1 = f - b0
    nbins = bins + 2
    cy = (np.arange(ch * cell, dtype=np.int32) // cell) * np.int32(cw * nbins)
    cx = (np.arange(cw * cell, dtype=np.int32) // cell) * np.int32(nbins)
    idx = (cy[:, None] + cx[None, :]) + b0
    m1 = mag * w1
    n = ch * cw * nbins
    hist = np.bincount(idx.ravel(), weights=(mag - m1).ravel(), minlength=n)
    hist += np.bincount((idx + 1).ravel(), weights=m1.ravel(), minlength=n)
    hist = hist.reshape(ch, cw, nbins)
    hist[:, :, bins] += hist[:, :, 0]  # slot 0 is bin bins-1; slot bins+1 is bin 0
    hist[:, :, 1] += hist[:, :, bins + 1]
    return np.ascontiguousarray(hist[:, :, 1 : bins + 1]).astype(np.float32)


def _block_map(cells: np.ndarray, clip: float) -> np.ndarray:
    """2x2-cell blocks at 1-cell stride, L2-Hys normalized independently, so a
    window's descriptor is exactly a contiguous slice of this map."""
    eps = 1e-6
    blocks = np.concatenate(
        [cells[:-1, :-1], cells[:-1, 1:], cells[1:, :-1], cells[1:, 1:]], axis=2
    )
    norm = np.sqrt((blocks**2).sum(axis=2, keepdims=True) + eps**2)
    blocks = blocks / norm
    np.clip(blocks, 0.0, clip, out=blocks)
    norm = np.sqrt((blocks**2).sum(axis=2, keepdims=True) + eps**2)
    return blocks / norm


def hog_block_map(img: Image, params: HogParams = HogParams()) -> np.ndarray:
    """Normalized block features for a whole image: (ch-1, cw-1, 36)."""
    if img.channels is not Channels.GRAY1:
        raise ValueError("hog features want a Gray1 image")
    if img.height < 3 or img.width < 3:
        raise ImageTooSmall("need at least 3x3 pixels for central differences")
    mag, ang = _mag_angle(img.pixels[:, :, 0].astype(np.float32))
    cells = _cell_histograms(mag, ang, params.cell_size, params.bins)
    if cells.shape[0] < params.block_cells or cells.shape[1] < params.block_cells:
        raise ImageTooSmall("image smaller than one block")
    return _block_map(cells, params.clip)


def hog_descriptor(img: Image, params: HogParams = HogParams()) -> np.ndarray:
    """Descriptor of one window-sized Gray1 image, row-major block order."""
    if (img.height, img.width) != (params.window, params.window):
        raise SizeMismatch(
            f"expected {params.window}x{params.window} window, "
            f"got {img.width}x{img.height}"
        )
    return hog_block_map(img, params).reshape(-1)


# --- Pyramid and detection ---------------------------------------------------


def build_pyramid(
    img: Image,
    scale_step: float = 1.2,
    min_size: int = 80,
    window: int = 64,
) -> list[tuple[float, Image]]:
    """Downscale chain. The starting scale is capped at window/min_size so
    that a window hit at any level maps back to a frame box of at least
    min_size pixels; below that size detection quality is not trusted."""
    if scale_step <= 1.0:
        raise ValueError("scale_step must exceed 1")
    levels = []
    scale = min(1.0, window / min_size) if min_size > 0 else 1.0
    prev = img
    while True:
        w = int(math.floor(img.width * scale + 0.5))
        h = int(math.floor(img.height * scale + 0.5))
        if w < window or h < window:
            break
        # resample from the previous level: same target dims as scaling the
        # original, but each gather reads a shrinking source
        prev = resize_bilinear(prev, w, h)
        levels.append((scale, prev))
        scale /= scale_step
    return levels


def _score_windows(block_map: np.ndarray, svm: LinearSvm, params: HogParams, step: int):
    """Margins for every window position (block-aligned, `step` blocks apart).

    A window's descriptor is the (bw x bw x 36) slice of the block map at its
    position, so the score map is a sum of 49 shifted projections instead of
    materializing per-window descriptors.
    """
    bw = params.blocks_per_window
    nby, nbx = block_map.shape[:2]
    oy, ox = nby - bw + 1, nbx - bw + 1
    if oy < 1 or ox < 1:
        return np.zeros((0, 0)), 0, 0
    w = svm.weights.reshape(bw, bw, -1)
    score = np.zeros((oy, ox), dtype=np.float32)
    for i in range(bw):
        for j in range(bw):
            score += block_map[i : i + oy, j : j + ox] @ w[i, j]
    score = score[::step, ::step] + np.float32(svm.bias)
    return score, oy, ox


def detect_faces(
    img: Image,
    svm: LinearSvm,
    params: HogParams = HogParams(),
    stride: int = 8,
    nms_iou: float = 0.3,
    scale_step: float = 1.2,
    min_size: int = 80,
) -> list[FaceBox]:
    """Sliding-window detection over the pyramid; returns NMS survivors
    sorted by margin descending (ties by y then x)."""
    if len(svm.weights) != params.descriptor_length:
        raise UntrainedModel(
            f"SVM length {len(svm.weights)} != descriptor length "
            f"{params.descriptor_length}"
        )
    if stride % params.cell_size != 0:
        raise ValueError("stride must be a multiple of cell_size")
    step = stride // params.cell_size
    gray = to_grayscale(img)
    raw: list[FaceBox] = []
    for scale, level in build_pyramid(gray, scale_step, min_size, params.window):
        bm = hog_block_map(level, params)
        score, oy, ox = _score_windows(bm, svm, params, step)
        ys, xs = np.nonzero(score > svm.threshold)
        for yi, xi in zip(ys, xs):
            px = xi * stride / scale
            py = yi * stride / scale
            side = params.window / scale
            raw.append(FaceBox(px, py, side, side, float(score[yi, xi])))
    raw.sort(key=lambda b: (-b.score, b.y, b.x))
    return nms(raw, nms_iou)


def nms(boxes: list[FaceBox], iou_threshold: float = 0.3) -> list[FaceBox]:
    """Greedy suppression: walk boxes by descending score, drop any box whose
    IoU with an already-kept box exceeds the threshold."""
    ordered = sorted(boxes, key=lambda b: (-b.score, b.y, b.x))
    kept: list[FaceBox] = []
    for box in ordered:
        if all(iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


# --- Pegasos trainer ---------------------------------------------------------


def train_linear_svm(
    positives,
    negatives,
    lam: float = 1e-4,
    epochs: int = 50,
    seed: int = 0,
    project: bool = True,
) -> LinearSvm:
    """Pegasos subgradient descent on the hinge loss with L2 regularization.

    The bias rides along as an always-one feature (so it is lightly
    regularized). After each epoch the full objective is evaluated and the
    best snapshot so far is what the returned model carries, which makes the
    reported objective curve non-increasing even though single Pegasos epochs
    are noisy.
    """
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise EmptyClass("need at least one example per class")
    if pos.shape[1] != neg.shape[1]:
        raise DimensionMismatch(
            f"positive dim {pos.shape[1]} != negative dim {neg.shape[1]}"
        )
    X = np.vstack([pos, neg])
    X = np.hstack([X, np.ones((len(X), 1))])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    n, d = X.shape
    rng = np.random.default_rng(seed)
    w = np.zeros(d)
    radius = 1.0 / math.sqrt(lam)

    def objective(wv):
        margins = y * (X @ wv)
        return float(np.mean(np.maximum(0.0, 1.0 - margins)) + 0.5 * lam * wv @ wv)

    t = 0
    best_w = w.copy()
    best_obj = objective(w)
    curve = [best_obj]
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            w *= 1.0 - eta * lam
            if y[i] * (X[i] @ w) < 1.0:
                w += eta * y[i] * X[i]
            if project:
                norm = np.linalg.norm(w)
                if norm > radius:
                    w *= radius / norm
        obj = objective(w)
        if obj < best_obj:
            best_obj = obj
            best_w = w.copy()
        curve.append(best_obj)
    return LinearSvm(
        weights=best_w[:-1].astype(np.float32),
        bias=float(best_w[-1]),
        threshold=0.0,
        objective_curve=tuple(curve),
    )


def predict_margin(svm: LinearSvm, vectors) -> np.ndarray:
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
    if X.shape[1] != len(svm.weights):
        raise DimensionMismatch(
            f"vector dim {X.shape[1]} != model dim {len(svm.weights)}"
        )
    return X @ svm.weights + np.float32(svm.bias)


# --- Model file --------------------------------------------------------------
#
# Little-endian layout: magic "HSVM" | version u32 (=1) | descriptor_len u32 |
# threshold f32 | bias f32 | weights f32 * descriptor_len.

_MAGIC = b"HSVM"
_VERSION = 1


def save_svm(path, svm: LinearSvm) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(svm.weights)))
        fh.write(struct.pack("<ff", svm.threshold, svm.bias))
        fh.write(np.ascontiguousarray(svm.weights, dtype="<f4").tobytes())


def load_svm(path) -> LinearSvm:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise BadMagic("not an HSVM model file")
    if len(data) < 20:
        raise CorruptModelFile("truncated header")
    version, length = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise VersionUnsupported(f"HSVM version {version} (this build reads 1)")
    threshold, bias = struct.unpack_from("<ff", data, 12)
    raw = data[20 : 20 + 4 * length]
    if len(raw) < 4 * length:
        raise CorruptModelFile("truncated weight payload")
    weights = np.frombuffer(raw, dtype="<f4").copy()
    try:
        return LinearSvm(weights=weights, bias=float(bias), threshold=float(threshold))
    except NonFiniteModel:
        raise
    except EmomaskError as exc:
        raise CorruptModelFile(str(exc)) from exc


# --- Bundled synthetic sample set --------------------------------------------


def _fill_ellipse(canvas, cx, cy, ax, ay, value):
    h, w = canvas.shape
    ys, xs = np.ogrid[:h, :w]
    mask = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    canvas[mask] = value


def synthetic_face_chip(rng, size: int = 64) -> Image:
    """Face-like Gray1 chip: bright head ellipse, dark eyes and mouth, with
    pose/intensity jitter. A stand-in corpus, not a face dataset."""
    s = size / 64.0
    bg = rng.uniform(80, 140)
    canvas = np.full((size, size), bg, dtype=np.float32)
    face = bg + rng.uniform(45, 75)
    cx = 32 * s + rng.uniform(-2, 2) * s
    cy = 34 * s + rng.uniform(-2, 2) * s
    _fill_ellipse(canvas, cx, cy, (22 + rng.uniform(-2, 2)) * s, (27 + rng.uniform(-2, 2)) * s, face)
    eye = face - rng.uniform(55, 80)
    dx = (13 + rng.uniform(-1.5, 1.5)) * s
    ey = cy - 8.5 * s + rng.uniform(-1.5, 1.5) * s
    _fill_ellipse(canvas, cx - dx, ey, 4.5 * s, 2.6 * s, eye)
    _fill_ellipse(canvas, cx + dx, ey, 4.5 * s, 2.6 * s, eye)
    mouth = face - rng.uniform(45, 70)
    my = cy + 13 * s + rng.uniform(-1.5, 1.5) * s
    _fill_ellipse(canvas, cx, my, (8.5 + rng.uniform(-1.5, 1.5)) * s, 2.8 * s, mouth)
    canvas += rng.normal(0.0, 5.0, canvas.shape)
    return Image(np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8)[:, :, None])


def synthetic_negative_chip(rng, size: int = 64) -> Image:
    """Non-face chip drawn from flat fields, noise, ramps, and blob clutter.
    Flat fields are included on purpose: they pin the decision bias below
    zero so blank frames produce no detections."""
    kind = rng.integers(0, 4)
    if kind == 0:
        canvas = np.full((size, size), rng.uniform(0, 255), dtype=np.float32)
    elif kind == 1:
        canvas = rng.uniform(0, 255, (size, size)).astype(np.float32)
    elif kind == 2:
        theta = rng.uniform(0, 2 * math.pi)
        ys, xs = np.mgrid[:size, :size]
        ramp = xs * math.cos(theta) + ys * math.sin(theta)
        lo, hi = rng.uniform(0, 100), rng.uniform(150, 255)
        span = max(float(np.ptp(ramp)), 1e-9)
        canvas = (lo + (ramp - ramp.min()) / span * (hi - lo)).astype(np.float32)
    else:
        canvas = np.full((size, size), rng.uniform(60, 180), dtype=np.float32)
        for _ in range(rng.integers(1, 7)):
            _fill_ellipse(
                canvas,
                rng.uniform(0, size),
                rng.uniform(0, size),
                rng.uniform(2, 14),
                rng.uniform(2, 14),
                rng.uniform(0, 255),
            )
        canvas += rng.normal(0.0, 5.0, canvas.shape)
    return Image(np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8)[:, :, None])


def make_training_set(
    n_pos: int, n_neg: int, seed: int = 0, params: HogParams = HogParams()
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    pos = np.stack(
        [hog_descriptor(synthetic_face_chip(rng, params.window), params) for _ in range(n_pos)]
    )
    neg = np.stack(
        [hog_descriptor(synthetic_negative_chip(rng, params.window), params) for _ in range(n_neg)]
    )
    return pos, neg


def train_default_detector(
    n_pos: int = 150,
    n_neg: int = 300,
    seed: int = 7,
    epochs: int = 30,
    params: HogParams = HogParams(),
) -> LinearSvm:
    pos, neg = make_training_set(n_pos, n_neg, seed, params)
    return train_linear_svm(pos, neg, epochs=epochs, seed=seed)
