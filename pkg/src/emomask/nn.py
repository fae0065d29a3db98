"""Inference-only CNN engine for VGG-style layer strings.

A network is described by a layer string (conv output widths interleaved with
'M' for 2x2 max pools); every conv is 3x3 stride-1 pad-1 followed by batch
normalization and ReLU, and the net ends with a global average pool feeding a
single dense layer. Weights travel in the VGGW container described at the
bottom of this file. Everything is float32 numpy; training lives elsewhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import BadMagic, EmomaskError, VersionUnsupported


class ShapeMismatch(EmomaskError):
    pass


class NegativeVariance(EmomaskError):
    pass


class InvalidConfig(EmomaskError):
    pass


class MissingTensor(EmomaskError):
    pass


class NonFiniteWeight(EmomaskError):
    pass


class CorruptWeightFile(EmomaskError):
    """Weight file ends mid-record or declares impossible sizes."""


@dataclass(frozen=True)
class VggConfig:
    """Layer string plus input/output widths. `layers` entries are conv
    output-channel counts or the literal "M" for a 2x2 stride-2 max pool."""

    name: str
    layers: tuple
    input_channels: int = 1
    num_classes: int = 7
    bn_eps: float = 1e-5

    def conv_channels(self) -> list[int]:
        return [c for c in self.layers if c != "M"]


# The reduced VGG11 variant: one 256-wide and one 512-wide conv removed, the
# only two-deletion layout whose stored f32 size lands at ~23.96 MiB.
VGG_BA_SMALL = VggConfig("vgg_ba_small", (64, "M", 128, "M", 256, "M", 512, 512, "M", 512, "M"))

VGG11 = VggConfig("vgg11", (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"))
VGG13 = VggConfig(
    "vgg13", (64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")
)
VGG16 = VggConfig(
    "vgg16",
    (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"),
)
VGG19 = VggConfig(
    "vgg19",
    # fmt: off
    (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
     512, 512, 512, 512, "M", 512, 512, 512, 512, "M"),
    # fmt: on
)


def _validate_config(config: VggConfig) -> None:
    if config.input_channels < 1 or config.num_classes < 1:
        raise InvalidConfig("channel and class counts must be >= 1")
    convs = 0
    for item in config.layers:
        if item == "M":
            continue
        if not isinstance(item, int) or item < 1:
            raise InvalidConfig(f"bad layer item {item!r}")
        convs += 1
    if convs == 0:
        raise InvalidConfig("config needs at least one conv layer")


def expected_shapes(config: VggConfig) -> dict[str, tuple]:
    """Parameter name -> shape map, in canonical (file) order."""
    _validate_config(config)
    shapes: dict[str, tuple] = {}
    in_ch = config.input_channels
    i = 0
    for item in config.layers:
        if item == "M":
            continue
        i += 1
        out_ch = item
        shapes[f"conv{i}.weight"] = (out_ch, in_ch, 3, 3)
        shapes[f"conv{i}.bias"] = (out_ch,)
        for stat in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"bn{i}.{stat}"] = (out_ch,)
        in_ch = out_ch
    shapes["dense.weight"] = (config.num_classes, in_ch)
    shapes["dense.bias"] = (config.num_classes,)
    return shapes


@dataclass(frozen=True)
class Model:
    config: VggConfig
    params: dict = field(repr=False)

    def __post_init__(self):
        for name, arr in self.params.items():
            arr.flags.writeable = False


def build_model(config: VggConfig) -> Model:
    """Zero-initialized model of the right shapes (running_var starts at 1 so
    batchnorm is well defined)."""
    params = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("running_var"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return Model(config, params)


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    stored: int
    bytes: int

    @property
    def mib(self) -> float:
        return self.bytes / 2**20


def count_params(model) -> ParamCount:
    """Parameter accounting. `model` may be a Model or a bare VggConfig;
    stored adds the two batchnorm running statistics per conv layer."""
    config = model.config if isinstance(model, Model) else model
    shapes = expected_shapes(config)
    trainable = stored = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        stored += n
        if "running_" not in name:
            trainable += n
    return ParamCount(trainable, stored, stored * 4)


# --- Primitive ops -----------------------------------------------------------


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, method: str = "im2col") -> np.ndarray:
    """3x3 stride-1 pad-1 cross-correlation plus bias.

    The im2col path lowers each 3x3 neighborhood into a row and lets BLAS do
    the work; the direct path keeps the definitional loop over kernel taps and
    exists as a slow reference.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch("conv2d wants NCHW input and OIHW weight")
    b, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if in_c != c or (kh, kw) != (3, 3) or bias.shape != (out_c,):
        raise ShapeMismatch(
            f"weight {weight.shape} / bias {bias.shape} do not fit input {x.shape}"
        )
    padded = np.zeros((b, c, h + 2, w + 2), dtype=np.float32)
    padded[:, :, 1:-1, 1:-1] = x
    if method == "im2col":
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
        out = cols @ weight.reshape(out_c, c * 9).astype(np.float32).T
        out = out.reshape(b, h, w, out_c).transpose(0, 3, 1, 2)
    elif method == "direct":
        out = np.zeros((b, out_c, h, w), dtype=np.float32)
        for dy in range(3):
            for dx in range(3):
                patch = padded[:, :, dy : dy + h, dx : dx + w]
                for oc in range(out_c):
                    out[:, oc] += np.einsum("bchw,c->bhw", patch, weight[oc, :, dy, dx])
    else:
        raise ValueError(f"unknown conv method {method!r}")
    return (out + bias.reshape(1, out_c, 1, 1)).astype(np.float32)


def batchnorm2d(x, gamma, beta, mean, var, eps: float = 1e-5) -> np.ndarray:
    c = x.shape[1]
    for v in (gamma, beta, mean, var):
        if np.asarray(v).shape != (c,):
            raise ShapeMismatch(f"batchnorm vectors must have length {c}")
    if np.any(np.asarray(var) < 0):
        raise NegativeVariance("running variance has negative entries")
    scale = (gamma / np.sqrt(var + eps)).astype(np.float32)
    shift = (beta - mean * scale).astype(np.float32)
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def pool2d(x: np.ndarray, kind: str = "max") -> np.ndarray:
    """2x2 stride-2 pooling; odd trailing row/column is dropped (floor
    division), which is what walks 44 -> 22 -> 11 -> 5 -> 2 -> 1."""
    b, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"cannot pool {h}x{w} down further")
    win = x[:, :, : oh * 2, : ow * 2].reshape(b, c, oh, 2, ow, 2)
    if kind == "max":
        return win.max(axis=(3, 5))
    if kind == "avg":
        return win.mean(axis=(3, 5), dtype=np.float32)
    raise ValueError(f"unknown pool kind {kind!r}")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), dtype=np.float32)


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeMismatch(
            f"dense shapes disagree: x {x.shape}, W {weight.shape}, b {bias.shape}"
        )
    return (x @ weight.T + bias).astype(np.float32)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Run the layer string over a float32 NCHW batch; returns (b, classes)
    logits."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[1] != model.config.input_channels:
        raise ShapeMismatch(
            f"expected (b,{model.config.input_channels},h,w) input, got {x.shape}"
        )
    p = model.params
    i = 0
    for item in model.config.layers:
        if item == "M":
            x = pool2d(x, "max")
            continue
        i += 1
        x = conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        x = batchnorm2d(
            x,
            p[f"bn{i}.gamma"],
            p[f"bn{i}.beta"],
            p[f"bn{i}.running_mean"],
            p[f"bn{i}.running_var"],
            model.config.bn_eps,
        )
        x = relu(x)
    pooled = global_avg_pool(x)
    return dense(pooled, p["dense.weight"], p["dense.bias"])


# --- VGGW weight container ---------------------------------------------------
#
# Little-endian layout:
#   magic "VGGW" | version u32 (=1) | tensor_count u32
#   per tensor: name_len u16 | name utf-8 | rank u8 | dims u32*rank | f32 data

_MAGIC = b"VGGW"
_VERSION = 1


def save_weights(path, model: Model) -> None:
    names = list(expected_shapes(model.config))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path, config: VggConfig) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise BadMagic("not a VGGW weight file")
    if len(data) < 12:
        raise CorruptWeightFile("truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise VersionUnsupported(f"VGGW version {version} (this build reads 1)")
    tensors: dict[str, np.ndarray] = {}
    pos = 12
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            raw = data[pos : pos + 4 * n]
            if len(raw) < 4 * n:
                raise CorruptWeightFile(f"tensor {name!r} data truncated")
            pos += 4 * n
        except struct.error as exc:
            raise CorruptWeightFile("truncated tensor record") from exc
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    expected = expected_shapes(config)
    params = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise MissingTensor(f"weight file lacks tensor {name!r}")
        arr = tensors[name]
        if arr.shape != shape:
            raise ShapeMismatch(f"{name}: file has {arr.shape}, config wants {shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteWeight(f"{name} contains NaN or Inf")
        params[name] = arr
    return Model(config, params)
