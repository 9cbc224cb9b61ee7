"""Image preprocessing: PPM decoding, channel order, resizing, normalization, rotation."""

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import ValidationError

from exray.errors import ImageFormatError, PipelineError
from exray.models import ROTATIONS, ChannelOrder, DType, PipelineSpec, Resizer
from exray.tensor import Tensor, affine_params, round_half_away

logger = logging.getLogger(__name__)

PPM_WHITESPACE = b" \t\n\r\x0b\x0c"
RAW_QUANT = affine_params(0.0, 255.0)


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray  # (height, width, channels) uint8, interleaved
    channel_order: ChannelOrder = ChannelOrder.RGB

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise PipelineError(f"Image data must be HxWx1 or HxWx3, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.channel_order == other.channel_order and np.array_equal(self.data, other.data)

    __hash__ = None


### PPM ###

def decode_ppm(buffer: bytes) -> Image:
    if buffer[:2] != b"P6":
        raise ImageFormatError(f"Unsupported image format {buffer[:2]!r}, expected binary PPM 'P6'", 0)
    offset = 2
    fields = []
    while len(fields) < 3:
        while offset < len(buffer) and (buffer[offset:offset + 1] in PPM_WHITESPACE or buffer[offset] == ord("#")):
            if buffer[offset] == ord("#"):
                while offset < len(buffer) and buffer[offset] not in b"\r\n":
                    offset += 1
            else:
                offset += 1
        start = offset
        while offset < len(buffer) and 48 <= buffer[offset] <= 57:
            offset += 1
        if offset == start:
            raise ImageFormatError("Malformed PPM header", offset)
        fields.append((int(buffer[start:offset]), start))
    if offset >= len(buffer) or buffer[offset:offset + 1] not in PPM_WHITESPACE:
        raise ImageFormatError("Malformed PPM header: missing separator before pixel data", offset)
    offset += 1

    (width, _), (height, _), (maxval, maxval_offset) = fields
    if maxval != 255:
        raise ImageFormatError(f"Unsupported maxval {maxval}, expected 255", maxval_offset)
    if width < 1 or height < 1:
        raise ImageFormatError(f"Invalid PPM dimensions {width}x{height}", fields[0][1])

    expected = width * height * 3
    payload = buffer[offset:offset + expected]
    if len(payload) < expected:
        raise ImageFormatError(
            f"Truncated PPM payload: expected {expected} bytes, got {len(payload)}",
            offset + len(payload),
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(data, ChannelOrder.RGB)


def encode_ppm(img: Image) -> bytes:
    if img.channels == 1:
        data = np.repeat(img.data, 3, axis=2)
    else:
        data = convert_channel_order(img, ChannelOrder.RGB).data
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + data.tobytes()


def read_ppm(path: Union[str, Path]) -> Image:
    try:
        buffer = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"Cannot read {path}: {exc}", 0)
    return decode_ppm(buffer)


def write_ppm(path: Union[str, Path], img: Image) -> None:
    Path(path).write_bytes(encode_ppm(img))


### RAW TENSORS ###

def image_to_tensor(img: Image) -> Tensor:
    """Raw RGB pixels as a U8 tensor whose dequantized values are gray levels."""
    if img.channels == 3:
        img = convert_channel_order(img, ChannelOrder.RGB)
    return Tensor(DType.U8, img.data, RAW_QUANT)


def tensor_to_image(t: Tensor) -> Image:
    if t.dtype != DType.U8 or t.array.ndim != 3:
        raise PipelineError(f"Raw image tensor must be U8 HxWxC, got {t.dtype.value} {t.shape}")
    return Image(t.array, ChannelOrder.RGB)


### STAGES ###

def convert_channel_order(img: Image, target: ChannelOrder) -> Image:
    if img.channels != 3:
        raise PipelineError("Channel order conversion needs a 3-channel image")
    target = ChannelOrder(target)
    if img.channel_order == target:
        return img
    return Image(img.data[:, :, ::-1], target)


def _check_target(target_h: int, target_w: int) -> None:
    if target_h < 1 or target_w < 1:
        raise PipelineError(f"Target dimensions must be at least 1, got {target_h}x{target_w}")


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(values), 0, 255).astype(np.uint8)


def _bilinear_axis(src: int, dst: int):
    # half-pixel centers, clamped to the edge
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, coords - lo


def resize_bilinear(img: Image, target_h: int, target_w: int) -> Image:
    _check_target(target_h, target_w)
    data = img.data.astype(np.float64)
    y0, y1, fy = _bilinear_axis(img.height, target_h)
    x0, x1, fx = _bilinear_axis(img.width, target_w)
    fy, fx = fy[:, None, None], fx[None, :, None]
    rows = data[y0] * (1.0 - fy) + data[y1] * fy
    out = rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx
    return Image(_to_u8(out), img.channel_order)


def _area_weights(src: int, dst: int) -> np.ndarray:
    scale = src / dst
    weights = np.zeros((dst, src), dtype=np.float64)
    for i in range(dst):
        start, end = i * scale, (i + 1) * scale
        for j in range(int(np.floor(start)), min(int(np.ceil(end)), src)):
            overlap = min(end, j + 1) - max(start, j)
            if overlap > 0:
                weights[i, j] = overlap
        weights[i] /= weights[i].sum()
    return weights


def resize_area(img: Image, target_h: int, target_w: int) -> Image:
    _check_target(target_h, target_w)
    wy = _area_weights(img.height, target_h)
    wx = _area_weights(img.width, target_w)
    out = np.einsum("ih,hwc,jw->ijc", wy, img.data.astype(np.float64), wx)
    return Image(_to_u8(out), img.channel_order)


def resize(img: Image, resizer: Resizer, target_h: int, target_w: int) -> Image:
    if Resizer(resizer) == Resizer.BILINEAR:
        return resize_bilinear(img, target_h, target_w)
    return resize_area(img, target_h, target_w)


def normalize(img: Image, norm_lo: float, norm_hi: float) -> Tensor:
    if not norm_lo < norm_hi:
        raise PipelineError(f"Invalid normalization range [{norm_lo}, {norm_hi}]")
    unit = img.data.astype(np.float32) / np.float32(255.0)
    return Tensor(DType.F32, unit * np.float32(norm_hi - norm_lo) + np.float32(norm_lo))


def rotate(img: Image, degrees: int) -> Image:
    """Clockwise rotation by a multiple of 90 degrees."""
    if degrees not in ROTATIONS:
        raise PipelineError(f"Unsupported rotation {degrees}; use 0, 90, 180 or 270")
    return Image(np.rot90(img.data, k=-(degrees // 90), axes=(0, 1)), img.channel_order)


def run_pipeline(img: Image, spec: PipelineSpec) -> Tensor:
    """rotate -> channel order -> resize -> normalize. Output is (target_h, target_w, 3)."""
    if img.channels == 1:
        img = Image(np.repeat(img.data, 3, axis=2), ChannelOrder.RGB)
    img = rotate(img, spec.rotation)
    img = convert_channel_order(img, spec.channel_order)
    img = resize(img, spec.resizer, spec.target_h, spec.target_w)
    return normalize(img, spec.norm_lo, spec.norm_hi)


### SPECS ###

def load_pipeline_spec(path: Union[str, Path]) -> PipelineSpec:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return PipelineSpec(**payload)
    except OSError as exc:
        raise PipelineError(f"Cannot read pipeline spec {path}: {exc}")
    except (ValueError, TypeError, ValidationError) as exc:
        raise PipelineError(f"Invalid pipeline spec {path}: {exc}")


def save_pipeline_spec(path: Union[str, Path], spec: PipelineSpec) -> None:
    Path(path).write_text(spec.json(indent=2), encoding="utf-8")


def pipeline_hash(spec: PipelineSpec) -> str:
    canonical = json.dumps(json.loads(spec.json()), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class BugFamily(str, Enum):
    CHANNEL_SWAP = "ChannelSwap"
    NORMALIZATION_RANGE = "NormalizationRange"
    RESIZER = "Resizer"
    ROTATION = "Rotation"


def inject_bug(spec: PipelineSpec, family: BugFamily) -> PipelineSpec:
    """The buggy counterpart of a correct spec for one preprocessing bug family."""
    family = BugFamily(family)
    if family == BugFamily.CHANNEL_SWAP:
        order = ChannelOrder.BGR if spec.channel_order == ChannelOrder.RGB else ChannelOrder.RGB
        return spec.copy(update={"channel_order": order})
    if family == BugFamily.NORMALIZATION_RANGE:
        lo, hi = (0.0, 1.0) if (spec.norm_lo, spec.norm_hi) != (0.0, 1.0) else (-1.0, 1.0)
        return spec.copy(update={"norm_lo": lo, "norm_hi": hi})
    if family == BugFamily.RESIZER:
        other = Resizer.BILINEAR if spec.resizer == Resizer.AREA else Resizer.AREA
        return spec.copy(update={"resizer": other})
    return spec.copy(update={"rotation": (spec.rotation + 90) % 360})
