"""Keypoint correspondences, DLT homography estimation, and emoji warping.

Six named keypoints tie an emoji to a face box. The philtrum stands in for
the nose tip because the nose tip leaves the face plane; keeping all six
points near-coplanar is what makes a single homography a faithful map.
Estimation runs normalized DLT over the 12x9 system the six correspondences
induce; warping inverse-maps the destination region and alpha-composites.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from . import EmomaskError


class DegenerateConfiguration(EmomaskError):
    """Keypoints coincide or three of them are collinear; DLT would be rank
    deficient."""


class DegenerateCloud(EmomaskError):
    """All points coincide; no similarity normalization exists."""


class NumericallySingular(EmomaskError):
    pass


class PointAtInfinity(EmomaskError):
    pass


class SingularHomography(EmomaskError):
    pass


class MalformedSidecar(EmomaskError):
    """Keypoint sidecar JSON is missing names or holds out-of-range values."""


class Space(enum.Enum):
    EMOJI_UNIT = "emoji_unit"
    FRAME_PIXELS = "frame_pixels"


KEYPOINT_NAMES = (
    "left_eye_outer",
    "right_eye_outer",
    "mouth_left",
    "mouth_right",
    "philtrum",
    "chin",
)

# Face-box proportion defaults: fractional (rx, ry) offsets into the box.
FACE_RATIOS = {
    "left_eye_outer": (0.18, 0.38),
    "right_eye_outer": (0.82, 0.38),
    "mouth_left": (0.30, 0.78),
    "mouth_right": (0.70, 0.78),
    "philtrum": (0.50, 0.72),
    "chin": (0.50, 0.98),
}

# Unit-square keypoints for the generated circular emoji faces.
EMOJI_UNIT_KEYPOINTS = {
    "left_eye_outer": (0.30, 0.42),
    "right_eye_outer": (0.70, 0.42),
    "mouth_left": (0.35, 0.70),
    "mouth_right": (0.65, 0.70),
    "philtrum": (0.50, 0.62),
    "chin": (0.50, 0.95),
}


@dataclass(frozen=True)
class KeypointSet:
    left_eye_outer: tuple
    right_eye_outer: tuple
    mouth_left: tuple
    mouth_right: tuple
    philtrum: tuple
    chin: tuple
    space: Space = Space.FRAME_PIXELS

    def __post_init__(self):
        pts = self.as_array()
        if not np.all(np.isfinite(pts)):
            raise DegenerateConfiguration("keypoints must be finite")
        _guard_degeneracy(pts)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in KEYPOINT_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, pts, space: Space) -> "KeypointSet":
        pts = np.asarray(pts, dtype=np.float64)
        kw = {n: (float(pts[i, 0]), float(pts[i, 1])) for i, n in enumerate(KEYPOINT_NAMES)}
        return cls(space=space, **kw)

    def as_dict(self) -> dict:
        return {n: list(getattr(self, n)) for n in KEYPOINT_NAMES}


def _guard_degeneracy(pts: np.ndarray) -> None:
    n = len(pts)
    scale = max(1.0, float(np.abs(pts).max()))
    for i in range(n):
        for j in range(i + 1, n):
            if math.hypot(*(pts[i] - pts[j])) <= 1e-12 * scale:
                raise DegenerateConfiguration(
                    f"keypoints {KEYPOINT_NAMES[i]} and {KEYPOINT_NAMES[j]} coincide"
                )
    # relative cross-product test: sin of the triangle's angle below 1e-9
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                cross = abs(u[0] * v[1] - u[1] * v[0])
                if cross <= 1e-9 * (np.hypot(*u) * np.hypot(*v)):
                    raise DegenerateConfiguration(
                        f"keypoints {KEYPOINT_NAMES[i]}/{KEYPOINT_NAMES[j]}/"
                        f"{KEYPOINT_NAMES[k]} are collinear"
                    )


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, scaled so m[2,2] == 1 whenever that entry is
    nonzero. Stored in float64: the estimation tolerances (1e-6 relative,
    1e-4 px reprojection) do not survive a float32 round trip at
    pixel-coordinate magnitudes."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


def proportional_landmarks(box, ratios: dict | None = None) -> KeypointSet:
    """Place the six keypoints at fixed fractional offsets inside a face box.

    `box` is anything with x/y/w/h attributes or a 4-sequence. Stands in for
    a learned landmark model; the defaults follow portrait drawing
    proportions.
    """
    if hasattr(box, "x"):
        x, y, w, h = box.x, box.y, box.w, box.h
    else:
        x, y, w, h = box
    table = FACE_RATIOS if ratios is None else ratios
    kw = {}
    for name in KEYPOINT_NAMES:
        rx, ry = table[name]
        kw[name] = (x + rx * w, y + ry * h)
    return KeypointSet(space=Space.FRAME_PIXELS, **kw)


def normalize_points(pts) -> tuple[np.ndarray, np.ndarray]:
    """Hartley conditioning: translate the centroid to the origin and scale
    so the mean distance from it is sqrt(2). Returns (normalized points, T)
    with T the 3x3 similarity that realizes the map."""
    pts = np.asarray(pts, dtype=np.float64)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.hypot(centered[:, 0], centered[:, 1]).mean()
    if mean_dist <= 1e-15:
        raise DegenerateCloud("all points coincide")
    s = math.sqrt(2.0) / mean_dist
    T = np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )
    return centered * s, T


def estimate_homography(src: KeypointSet, dst: KeypointSet) -> Homography:
    """Normalized DLT over the six correspondences.

    Builds two rows per correspondence, takes the right singular vector of
    the smallest singular value as the flattened homography, denormalizes,
    and rescales to m[2,2] = 1. The smallest singular value must be isolated;
    a (near-)tie means the correspondence geometry does not pin down a unique
    plane-to-plane map.
    """
    sp = src.as_array()
    dp = dst.as_array()
    sn, Ts = normalize_points(sp)
    dn, Td = normalize_points(dp)
    A = np.zeros((12, 9), dtype=np.float64)
    for i in range(6):
        x, y = sn[i]
        u, v = dn[i]
        A[2 * i] = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]
        A[2 * i + 1] = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]
    _, s, vt = np.linalg.svd(A)
    if (s[-2] - s[-1]) <= 1e-9 * s[0]:
        raise DegenerateConfiguration(
            "smallest singular value of the DLT system is not unique"
        )
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    hom = Homography(H)
    if abs(np.linalg.det(hom.m)) <= 1e-12:
        raise NumericallySingular("estimated homography is singular")
    return hom


def apply_homography(h: Homography, p):
    """Map one (x, y) point or an (n, 2) array through h with perspective
    division."""
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    pts = arr.reshape(-1, 2)
    ones = np.ones((len(pts), 1))
    mapped = np.hstack([pts, ones]) @ h.m.T
    w = mapped[:, 2]
    if np.any(np.abs(w) <= 1e-12):
        raise PointAtInfinity("homogeneous w vanished during mapping")
    out = mapped[:, :2] / w[:, None]
    return out[0] if single else out


def reprojection_error(h: Homography, src: KeypointSet, dst: KeypointSet) -> float:
    mapped = apply_homography(h, src.as_array())
    return float(np.max(np.hypot(*(mapped - dst.as_array()).T)))


def warp_composite(frame, emoji, h: Homography, sampling: str = "bilinear"):
    """Warp an RGBA emoji into an RGB frame through h (emoji pixel -> frame
    pixel) and alpha-composite.

    Only the frame-space bounding box of the emoji's mapped outer corners is
    touched; the rest of the frame is carried over bit-identically. Sampling
    uses premultiplied alpha so transparent emoji texels never bleed color.
    """
    from .imagecore import Channels, Image

    if frame.channels is not Channels.RGB3:
        raise ValueError("frame must be RGB3")
    if emoji.channels is not Channels.RGBA4:
        raise ValueError("emoji must be RGBA4")
    if sampling not in ("bilinear", "nearest"):
        raise ValueError(f"unknown sampling {sampling!r}")
    if abs(np.linalg.det(h.m)) <= 1e-12:
        raise SingularHomography("cannot invert the emoji-to-frame map")
    hinv = np.linalg.inv(h.m)

    ew, eh = emoji.width, emoji.height
    fw, fh = frame.width, frame.height
    # one pixel beyond the texel grid: bilinear taps reach no further
    corners = np.array(
        [[-1.0, -1.0], [ew, -1.0], [-1.0, eh], [ew, eh]], dtype=np.float64
    )
    mapped = np.hstack([corners, np.ones((4, 1))]) @ h.m.T
    wcomp = mapped[:, 2]
    finite = np.abs(wcomp) > 1e-12
    if not np.any(finite):
        return frame
    proj = mapped[finite, :2] / wcomp[finite, None]
    x0 = max(0, int(np.floor(proj[:, 0].min())))
    x1 = min(fw - 1, int(np.ceil(proj[:, 0].max())))
    y0 = max(0, int(np.floor(proj[:, 1].min())))
    y1 = min(fh - 1, int(np.ceil(proj[:, 1].max())))
    if x0 > x1 or y0 > y1:
        return frame

    xs, ys = np.meshgrid(
        np.arange(x0, x1 + 1, dtype=np.float64),
        np.arange(y0, y1 + 1, dtype=np.float64),
    )
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    ok = np.abs(denom) > 1e-12
    safe = np.where(ok, denom, 1.0)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / safe
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / safe

    rgba = emoji.pixels.astype(np.float32)
    rgb = rgba[:, :, :3]
    alpha = rgba[:, :, 3] / 255.0

    if sampling == "nearest":
        tx = np.floor(sx + 0.5).astype(np.int64)
        ty = np.floor(sy + 0.5).astype(np.int64)
        inb = ok & (tx >= 0) & (tx < ew) & (ty >= 0) & (ty < eh)
        txc = np.clip(tx, 0, ew - 1)
        tyc = np.clip(ty, 0, eh - 1)
        a_acc = np.where(inb, alpha[tyc, txc], 0.0).astype(np.float32)
        p_acc = (
            rgb[tyc, txc] * (alpha[tyc, txc] * inb)[:, :, None]
        ).astype(np.float32)
    else:
        fx0 = np.floor(sx)
        fy0 = np.floor(sy)
        wx = (sx - fx0).astype(np.float32)
        wy = (sy - fy0).astype(np.float32)
        ix = fx0.astype(np.int64)
        iy = fy0.astype(np.int64)
        a_acc = np.zeros(xs.shape, dtype=np.float32)
        p_acc = np.zeros(xs.shape + (3,), dtype=np.float32)
        for dy, wys in ((0, 1.0 - wy), (1, wy)):
            for dx, wxs in ((0, 1.0 - wx), (1, wx)):
                tx = ix + dx
                ty = iy + dy
                inb = ok & (tx >= 0) & (tx < ew) & (ty >= 0) & (ty < eh)
                txc = np.clip(tx, 0, ew - 1)
                tyc = np.clip(ty, 0, eh - 1)
                wgt = (wxs * wys) * inb
                a_tap = alpha[tyc, txc]
                a_acc += wgt * a_tap
                p_acc += (wgt * a_tap)[:, :, None] * rgb[tyc, txc]

    region = frame.pixels[y0 : y1 + 1, x0 : x1 + 1].astype(np.float32)
    out_region = p_acc + (1.0 - a_acc)[:, :, None] * region
    out = frame.pixels.copy()
    out[y0 : y1 + 1, x0 : x1 + 1] = np.clip(
        np.floor(out_region + 0.5), 0.0, 255.0
    ).astype(np.uint8)
    return Image(out)


# --- Keypoint sidecar files --------------------------------------------------


def read_keypoint_sidecar(path) -> KeypointSet:
    """Load a unit-coordinate keypoint JSON sitting next to an emoji image."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedSidecar(f"{path}: invalid JSON") from exc
    kw = {}
    for name in KEYPOINT_NAMES:
        if name not in data:
            raise MalformedSidecar(f"{path}: missing keypoint {name!r}")
        pt = data[name]
        if (
            not isinstance(pt, (list, tuple))
            or len(pt) != 2
            or not all(isinstance(v, (int, float)) for v in pt)
        ):
            raise MalformedSidecar(f"{path}: keypoint {name!r} is not an [x, y] pair")
        x, y = float(pt[0]), float(pt[1])
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise MalformedSidecar(f"{path}: keypoint {name!r} outside the unit square")
        kw[name] = (x, y)
    try:
        return KeypointSet(space=Space.EMOJI_UNIT, **kw)
    except DegenerateConfiguration as exc:
        raise MalformedSidecar(f"{path}: {exc}") from exc


def write_keypoint_sidecar(path, kps: KeypointSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(kps.as_dict(), fh, indent=2)
        fh.write("\n")


def unit_to_pixels(kps: KeypointSet, width: int, height: int) -> KeypointSet:
    """Scale unit-square keypoints onto a (width, height) texel grid; the
    unit square's far edge lands on the last texel center."""
    pts = kps.as_array() * np.array([width - 1, height - 1], dtype=np.float64)
    return KeypointSet.from_array(pts, Space.FRAME_PIXELS)
