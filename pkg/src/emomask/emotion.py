"""Face-crop preprocessing, 7-class expression classification, and the
optional majority-vote temporal smoother."""

from __future__ import annotations

import enum
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import EmomaskError
from .geometry import KeypointSet, read_keypoint_sidecar
from .imagecore import Channels, Image, crop, read_image, resize_bilinear, to_grayscale
from .nn import Model, ShapeMismatch, forward, softmax


class DegenerateBox(EmomaskError):
    pass


class MissingEmoji(EmomaskError):
    pass


class EmotionLabel(enum.IntEnum):
    """FER2013 index convention."""

    ANGRY = 0
    DISGUST = 1
    FEAR = 2
    HAPPY = 3
    SAD = 4
    SURPRISE = 5
    NEUTRAL = 6

    @property
    def label_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "EmotionLabel":
        return cls[name.upper()]


@dataclass(frozen=True)
class EmotionScores:
    probs: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.probs, dtype=np.float32)
        if p.shape != (7,):
            raise ShapeMismatch(f"scores must be length 7, got {p.shape}")
        if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError("scores must be a probability vector")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)


# Mean/std 0.5 on [0,1] pixels; the training side enforces the identical
# constants, which is what the cross-framework parity check rides on.
_NORM_MEAN = 0.5
_NORM_STD = 0.5
_RESIZE = 48
_CROP = 44


def preprocess_face(frame: Image, box) -> np.ndarray:
    """Face box -> float32 [1, 1, 44, 44] network input.

    Crop (zero-padded at frame edges), grayscale, bilinear resize to 48x48,
    center-crop 44x44, scale to [0, 1], then (x - 0.5) / 0.5.
    """
    if hasattr(box, "as_int"):
        x, y, w, h = box.as_int()
    else:
        x, y, w, h = (int(v) for v in box)
    if w <= 0 or h <= 0:
        raise DegenerateBox(f"face box {w}x{h} has no area")
    face = crop(frame, x, y, w, h)
    face = to_grayscale(face)
    face = resize_bilinear(face, _RESIZE, _RESIZE)
    off = (_RESIZE - _CROP) // 2
    gray = face.pixels[off : off + _CROP, off : off + _CROP, 0].astype(np.float32)
    gray /= 255.0
    gray = (gray - _NORM_MEAN) / _NORM_STD
    return gray[None, None, :, :]


def classify(model: Model, tensor: np.ndarray) -> tuple[EmotionScores, EmotionLabel]:
    """Softmax scores plus argmax label (ties resolve to the lowest index)."""
    if model.config.num_classes != 7:
        raise ShapeMismatch("expression model must have 7 output classes")
    logits = forward(model, tensor)
    probs = softmax(logits[0])
    return EmotionScores(probs), EmotionLabel(int(np.argmax(probs)))


class Smoother:
    """Majority vote over the last k labels; ties go to the label whose most
    recent occurrence is newest. Single-writer mutable state."""

    def __init__(self, k: int = 5):
        if k < 1:
            raise ValueError("window must hold at least one label")
        self.k = k
        self.window: deque[EmotionLabel] = deque(maxlen=k)

    @property
    def current(self) -> EmotionLabel | None:
        if not self.window:
            return None
        counts = Counter(self.window)
        top = max(counts.values())
        recency = {lab: i for i, lab in enumerate(self.window)}
        return max(
            (lab for lab, c in counts.items() if c == top),
            key=lambda lab: recency[lab],
        )

    def push(self, label: EmotionLabel) -> EmotionLabel:
        self.window.append(label)
        return self.current

    def reset(self) -> None:
        self.window.clear()


def smooth(state: Smoother, new_label: EmotionLabel) -> tuple[Smoother, EmotionLabel]:
    return state, state.push(new_label)


# --- Emoji set ---------------------------------------------------------------


def load_emoji_set(directory) -> dict[EmotionLabel, tuple[Image, KeypointSet]]:
    """Load `angry.png` ... `neutral.png` plus their keypoint sidecars.

    Images without an alpha channel get an opaque one so the compositor
    always sees RGBA.
    """
    directory = Path(directory)
    out = {}
    for label in EmotionLabel:
        img_path = directory / f"{label.label_name}.png"
        side_path = directory / f"{label.label_name}.json"
        if not img_path.exists():
            raise MissingEmoji(f"emoji image missing: {img_path}")
        if not side_path.exists():
            raise MissingEmoji(f"keypoint sidecar missing: {side_path}")
        img = read_image(img_path)
        if img.channels is Channels.RGB3:
            px = np.dstack(
                [img.pixels, np.full(img.pixels.shape[:2], 255, dtype=np.uint8)]
            )
            img = Image(px)
        elif img.channels is Channels.GRAY1:
            g = img.pixels[:, :, 0]
            px = np.dstack([g, g, g, np.full_like(g, 255)])
            img = Image(px)
        out[label] = (img, read_keypoint_sidecar(side_path))
    return out
