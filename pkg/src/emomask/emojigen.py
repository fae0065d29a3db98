"""Procedural emoji faces, one per expression class.

Ships as a generator rather than bundled art so the repository carries no
binary assets; the demo pipeline and the tests both draw their emoji sets
through this module. Feature placement agrees with the default unit-square
keypoints that the sidecar files record.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .emotion import EmotionLabel
from .geometry import EMOJI_UNIT_KEYPOINTS, KeypointSet, Space, write_keypoint_sidecar
from .imagecore import Image, ImageFormat, encode_image

_FACE = (255, 205, 70)
_RIM = (180, 130, 20)
_INK = (60, 40, 20)


def _disc(xx, yy, cx, cy, rx, ry=None):
    ry = rx if ry is None else ry
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _arc_band(xx, yy, cx, cy, r, width, lower: bool):
    d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    band = np.abs(d - r) <= width
    return band & ((yy >= cy) if lower else (yy <= cy))


def draw_emoji(label: EmotionLabel, size: int = 128) -> Image:
    """RGBA emoji disc with class-specific eyes and mouth."""
    ys, xs = np.mgrid[0:size, 0:size]
    xx = (xs + 0.5) / size
    yy = (ys + 0.5) / size
    face = _disc(xx, yy, 0.5, 0.5, 0.48)
    rim = face & ~_disc(xx, yy, 0.5, 0.5, 0.44)
    rgb = np.zeros((size, size, 3), dtype=np.float32)
    rgb[face] = _FACE
    rgb[rim] = _RIM
    ink = np.zeros((size, size), dtype=bool)

    ex_l, ex_r, ey = 0.30, 0.70, 0.42
    if label is EmotionLabel.SURPRISE or label is EmotionLabel.FEAR:
        ink |= _disc(xx, yy, ex_l, ey, 0.055)
        ink |= _disc(xx, yy, ex_r, ey, 0.055)
    elif label is EmotionLabel.DISGUST:
        ink |= _disc(xx, yy, ex_l, ey, 0.06, 0.02)
        ink |= _disc(xx, yy, ex_r, ey, 0.06, 0.02)
    else:
        ink |= _disc(xx, yy, ex_l, ey, 0.045, 0.055)
        ink |= _disc(xx, yy, ex_r, ey, 0.045, 0.055)
    if label is EmotionLabel.ANGRY:
        # slanted brows: thin rotated bands above the eyes
        for cx, sgn in ((ex_l, 1.0), (ex_r, -1.0)):
            t = (yy - 0.30) - sgn * 0.5 * (xx - cx)
            ink |= (np.abs(t) <= 0.015) & (np.abs(xx - cx) <= 0.08)

    my = 0.70
    if label is EmotionLabel.HAPPY:
        ink |= _arc_band(xx, yy, 0.5, 0.55, 0.212, 0.018, lower=True) & (yy >= my - 0.02)
    elif label is EmotionLabel.SAD:
        ink |= _arc_band(xx, yy, 0.5, 0.87, 0.212, 0.018, lower=False) & (yy <= my + 0.05)
    elif label is EmotionLabel.SURPRISE:
        ink |= _disc(xx, yy, 0.5, my + 0.04, 0.07, 0.09)
    elif label is EmotionLabel.FEAR:
        ink |= _disc(xx, yy, 0.5, my + 0.02, 0.05, 0.065) & ~_disc(
            xx, yy, 0.5, my + 0.02, 0.03, 0.04
        )
    elif label is EmotionLabel.DISGUST:
        wave = np.abs((yy - my) - 0.02 * np.sin(xx * 40.0)) <= 0.014
        ink |= wave & (np.abs(xx - 0.5) <= 0.16)
    else:  # angry, neutral: straight mouth
        ink |= (np.abs(yy - my) <= 0.014) & (np.abs(xx - 0.5) <= 0.15)

    rgb[ink & face] = _INK
    alpha = np.where(face, 255, 0).astype(np.uint8)
    rgba = np.dstack([np.clip(rgb, 0, 255).astype(np.uint8), alpha])
    return Image(rgba)


def generate_emoji_set(directory, size: int = 128) -> list[Path]:
    """Write the seven emoji PNGs plus keypoint sidecars into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kps = KeypointSet(space=Space.EMOJI_UNIT, **EMOJI_UNIT_KEYPOINTS)
    written = []
    for label in EmotionLabel:
        img_path = directory / f"{label.label_name}.png"
        img_path.write_bytes(encode_image(draw_emoji(label, size), ImageFormat.PNG))
        write_keypoint_sidecar(directory / f"{label.label_name}.json", kps)
        written.extend([img_path, directory / f"{label.label_name}.json"])
    return written
