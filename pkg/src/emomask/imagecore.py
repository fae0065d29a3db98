"""Image container plus the small set of raster operations the pipeline needs.

Pixels are 8-bit, row-major, top-left origin, interleaved channels. Decoders
exist for baseline PNG, binary PGM (P5) and binary PPM (P6); everything else
is out of scope.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import EmomaskError


class MalformedFile(EmomaskError):
    """File bytes do not form a valid image in the stated format."""


class UnsupportedVariant(EmomaskError):
    """Valid file, but a variant outside the supported subset (e.g. 16-bit)."""


class ZeroDimension(EmomaskError):
    """Requested output width or height is below 1."""


class Channels(enum.Enum):
    GRAY1 = 1
    RGB3 = 3
    RGBA4 = 4

    @property
    def count(self) -> int:
        return self.value


_CHANNELS_BY_COUNT = {c.value: c for c in Channels}

# ITU-R BT.601 luma weights, shared verbatim with the training-side transform.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class Image:
    """Immutable 8-bit raster: ``pixels`` has shape (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in _CHANNELS_BY_COUNT:
            raise ValueError(f"bad pixel array shape {self.pixels.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ZeroDimension("image dimensions must be >= 1")
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> Channels:
        return _CHANNELS_BY_COUNT[self.pixels.shape[2]]


class ImageFormat(enum.Enum):
    PNG = "png"
    PGM = "pgm"
    PPM = "ppm"


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def sniff_format(data: bytes) -> ImageFormat:
    """Guess the container from magic bytes."""
    if data[:8] == _PNG_SIGNATURE:
        return ImageFormat.PNG
    if data[:2] == b"P5":
        return ImageFormat.PGM
    if data[:2] == b"P6":
        return ImageFormat.PPM
    raise MalformedFile("unrecognized image magic")


def decode_image(data: bytes, fmt: ImageFormat | None = None) -> Image:
    """Decode PNG/PGM/PPM bytes. PGM yields Gray1, PPM yields RGB3, PNG keeps
    its source channel layout."""
    if fmt is None:
        fmt = sniff_format(data)
    if fmt is ImageFormat.PNG:
        return _decode_png(data)
    if fmt is ImageFormat.PGM:
        return _decode_pnm(data, b"P5", 1)
    if fmt is ImageFormat.PPM:
        return _decode_pnm(data, b"P6", 3)
    raise ValueError(f"unknown format {fmt}")


def encode_image(img: Image, fmt: ImageFormat) -> bytes:
    if fmt is ImageFormat.PNG:
        return _encode_png(img)
    if fmt is ImageFormat.PGM:
        if img.channels is not Channels.GRAY1:
            raise UnsupportedVariant("PGM holds single-channel images only")
        return _encode_pnm(img, b"P5")
    if fmt is ImageFormat.PPM:
        if img.channels is not Channels.RGB3:
            raise UnsupportedVariant("PPM holds three-channel images only")
        return _encode_pnm(img, b"P6")
    raise ValueError(f"unknown format {fmt}")


def read_image(path) -> Image:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_image(path, img: Image) -> None:
    name = str(path).lower()
    if name.endswith(".png"):
        fmt = ImageFormat.PNG
    elif name.endswith(".pgm"):
        fmt = ImageFormat.PGM
    elif name.endswith(".ppm"):
        fmt = ImageFormat.PPM
    else:
        raise ValueError(f"cannot infer image format from {path!r}")
    with open(path, "wb") as fh:
        fh.write(encode_image(img, fmt))


# --- PNM (PGM / PPM) -------------------------------------------------------


def _pnm_tokens(data: bytes, count: int, start: int):
    """Read `count` whitespace-separated header tokens after `start`,
    honoring '#' comment lines. Returns (tokens, offset past the single
    whitespace byte that terminates the last token)."""
    tokens = []
    i = start
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise MalformedFile("truncated PNM header")
        tokens.append(data[i:j])
        i = j
    if i >= n:
        raise MalformedFile("truncated PNM header")
    return tokens, i + 1  # exactly one whitespace byte before raster data


def _decode_pnm(data: bytes, magic: bytes, nchan: int) -> Image:
    if data[:2] != magic:
        raise MalformedFile(f"bad magic, expected {magic.decode()}")
    try:
        (w_tok, h_tok, max_tok), offset = _pnm_tokens(data, 3, 2)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise MalformedFile("non-numeric PNM header field") from exc
    if width < 1 or height < 1:
        raise MalformedFile("non-positive PNM dimensions")
    if maxval != 255:
        raise UnsupportedVariant(f"only 8-bit samples supported, maxval={maxval}")
    need = width * height * nchan
    raster = data[offset : offset + need]
    if len(raster) < need:
        raise MalformedFile("truncated PNM raster")
    px = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, nchan)
    return Image(px.copy())


def _encode_pnm(img: Image, magic: bytes) -> bytes:
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.pixels.tobytes()


# --- PNG (RFC 2083 baseline: 8-bit, non-interlaced) --------------------------


def _decode_png(data: bytes) -> Image:
    if data[:8] != _PNG_SIGNATURE:
        raise MalformedFile("bad PNG signature")
    pos = 8
    ihdr = None
    idat = bytearray()
    plte = None
    trns = None
    seen_iend = False
    while pos < len(data):
        if pos + 8 > len(data):
            raise MalformedFile("truncated PNG chunk header")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        ctype = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if len(body) < length or pos + 12 + length > len(data):
            raise MalformedFile("truncated PNG chunk")
        (crc,) = struct.unpack(">I", data[pos + 8 + length : pos + 12 + length])
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise MalformedFile(f"PNG chunk {ctype!r} CRC mismatch")
        pos += 12 + length
        if ctype == b"IHDR":
            ihdr = body
        elif ctype == b"PLTE":
            plte = body
        elif ctype == b"tRNS":
            trns = body
        elif ctype == b"IDAT":
            idat.extend(body)
        elif ctype == b"IEND":
            seen_iend = True
            break
    if ihdr is None or len(ihdr) != 13:
        raise MalformedFile("missing or bad IHDR")
    if not seen_iend or not idat:
        raise MalformedFile("missing IDAT/IEND")
    width, height, depth, ctype_n, comp, filt, interlace = struct.unpack(
        ">IIBBBBB", ihdr
    )
    if width < 1 or height < 1:
        raise MalformedFile("non-positive PNG dimensions")
    if comp != 0 or filt != 0:
        raise MalformedFile("bad compression/filter method")
    if depth != 8:
        raise UnsupportedVariant(f"bit depth {depth} not supported")
    if interlace != 0:
        raise UnsupportedVariant("interlaced PNG not supported")
    nchan_by_ctype = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}
    if ctype_n not in nchan_by_ctype:
        raise UnsupportedVariant(f"PNG color type {ctype_n} not supported")
    nchan = nchan_by_ctype[ctype_n]
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise MalformedFile("corrupt IDAT stream") from exc
    stride = width * nchan
    if len(raw) != (stride + 1) * height:
        raise MalformedFile("PNG raster size mismatch")
    px = _unfilter(raw, height, stride, nchan)
    px = px.reshape(height, width, nchan)
    if ctype_n == 3:
        if plte is None or len(plte) % 3 != 0:
            raise MalformedFile("palette PNG without valid PLTE")
        pal = np.frombuffer(plte, dtype=np.uint8).reshape(-1, 3)
        idx = px[:, :, 0]
        if idx.max() >= pal.shape[0]:
            raise MalformedFile("palette index out of range")
        rgb = pal[idx]
        if trns is not None:
            alpha_tab = np.full(pal.shape[0], 255, dtype=np.uint8)
            a = np.frombuffer(trns, dtype=np.uint8)
            alpha_tab[: len(a)] = a
            px = np.dstack([rgb, alpha_tab[idx]])
        else:
            px = rgb
    elif ctype_n == 4:
        # gray+alpha: widen to RGBA so the channel enum stays closed
        g = px[:, :, 0]
        px = np.dstack([g, g, g, px[:, :, 1]])
    return Image(np.ascontiguousarray(px))


def _unfilter(raw: bytes, height: int, stride: int, bpp: int) -> np.ndarray:
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.uint8)
    for y in range(height):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        prior = out[y - 1].astype(np.int32) if y > 0 else np.zeros(stride, np.int32)
        if ftype == 0:
            recon = line
        elif ftype == 2:  # Up
            recon = (line + prior) & 0xFF
        elif ftype == 1:  # Sub: per-channel prefix sum, mod 256
            recon = line.reshape(-1, bpp).cumsum(axis=0) & 0xFF
            recon = recon.reshape(-1)
        elif ftype == 3:  # Average
            recon = np.empty(stride, np.int32)
            for x in range(stride):
                left = recon[x - bpp] if x >= bpp else 0
                recon[x] = (line[x] + ((left + prior[x]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            recon = np.empty(stride, np.int32)
            for x in range(stride):
                a = recon[x - bpp] if x >= bpp else 0
                b = prior[x]
                c = prior[x - bpp] if x >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                recon[x] = (line[x] + pred) & 0xFF
        else:
            raise MalformedFile(f"unknown PNG filter type {ftype}")
        out[y] = recon.astype(np.uint8)
    return out


def _encode_png(img: Image) -> bytes:
    ctype = {1: 0, 3: 2, 4: 6}[img.channels.count]
    h, w, c = img.pixels.shape
    raster = np.empty((h, w * c + 1), dtype=np.uint8)
    raster[:, 0] = 0  # filter type None on every scanline
    raster[:, 1:] = img.pixels.reshape(h, w * c)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, ctype, 0, 0, 0)
    out = bytearray(_PNG_SIGNATURE)
    for name, body in (
        (b"IHDR", ihdr),
        (b"IDAT", zlib.compress(raster.tobytes(), 6)),
        (b"IEND", b""),
    ):
        out += struct.pack(">I", len(body))
        out += name
        out += body
        out += struct.pack(">I", zlib.crc32(name + body) & 0xFFFFFFFF)
    return bytes(out)


# --- Raster operations -------------------------------------------------------


def to_grayscale(img: Image) -> Image:
    """BT.601 luma; Gray1 input is returned unchanged, alpha is ignored."""
    if img.channels is Channels.GRAY1:
        return img
    rgb = img.pixels[:, :, :3].astype(np.float32)
    wr, wg, wb = GRAY_WEIGHTS
    gray = wr * rgb[:, :, 0] + wg * rgb[:, :, 1] + wb * rgb[:, :, 2]
    return Image(np.floor(gray + 0.5).astype(np.uint8)[:, :, None])


def resize_bilinear(img: Image, out_w: int, out_h: int) -> Image:
    """Bilinear resampling with aligned sample centers and edge clamping."""
    if out_w < 1 or out_h < 1:
        raise ZeroDimension(f"bad output size {out_w}x{out_h}")
    if out_w == img.width and out_h == img.height:
        return img
    src = img.pixels.astype(np.float32)
    resized = _resize_f32(src, out_w, out_h)
    return Image(np.floor(resized + 0.5).astype(np.uint8))


def _resize_f32(src: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resampling core on a float32 (h, w, c) array; returns float32.
    Separable: rows first, then columns, so only two full-width gathers."""
    in_h, in_w = src.shape[:2]
    sx = in_w / out_w
    sy = in_h / out_h
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * sx - 0.5
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * sy - 0.5
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).astype(np.float32)[None, :, None]
    fy = (ys - y0).astype(np.float32)[:, None, None]
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    rows = src[y0c] * (1.0 - fy) + src[y1c] * fy
    return rows[:, x0c] * (1.0 - fx) + rows[:, x1c] * fx


def crop(img: Image, x: int, y: int, w: int, h: int) -> Image:
    """Extract a w-by-h region anchored at (x, y); area outside the frame is
    filled with zeros so boxes straddling the border stay usable."""
    if w < 1 or h < 1:
        raise ZeroDimension(f"bad crop size {w}x{h}")
    c = img.pixels.shape[2]
    out = np.zeros((h, w, c), dtype=np.uint8)
    sx0 = max(x, 0)
    sy0 = max(y, 0)
    sx1 = min(x + w, img.width)
    sy1 = min(y + h, img.height)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y : sy1 - y, sx0 - x : sx1 - x] = img.pixels[sy0:sy1, sx0:sx1]
    return Image(out)
