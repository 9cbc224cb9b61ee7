"""Tensors, integer quantization math and the `.ten` binary tensor file."""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from exray.errors import CalibrationError, NonFiniteError, QuantizationError, TensorFormatError
from exray.models import DType, QuantParams, QuantScheme

logger = logging.getLogger(__name__)

NUMPY_DTYPES = {
    DType.F32: np.dtype("<f4"),
    DType.U8: np.dtype("u1"),
    DType.I8: np.dtype("i1"),
    DType.I32: np.dtype("<i4"),
}
DTYPE_CODES = {DType.F32: 0, DType.U8: 1, DType.I8: 2, DType.I32: 3}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

MAGIC = b"TEN0"
U8_LEVELS = 255
I8_LIMIT = 127


@dataclass(frozen=True, eq=False)
class Tensor:
    dtype: DType
    array: np.ndarray
    quant: Optional[QuantParams] = None
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        dtype = DType(self.dtype)
        array = np.ascontiguousarray(self.array, dtype=NUMPY_DTYPES[dtype]).view()
        array.flags.writeable = False
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "array", array)

        quantized = dtype in (DType.U8, DType.I8)
        if quantized and self.quant is None:
            raise QuantizationError(f"{dtype.value} tensor requires quantization parameters")
        if not quantized and self.quant is not None:
            raise QuantizationError(f"{dtype.value} tensor cannot carry quantization parameters")
        if self.quant is not None and self.quant.per_channel:
            axis = self.quant.channel_axis
            if not -array.ndim <= axis < array.ndim:
                raise QuantizationError(f"channel_axis {axis} out of range for shape {array.shape}")
            if len(self.quant.scale) != array.shape[axis]:
                raise QuantizationError(
                    f"{len(self.quant.scale)} scales for channel extent {array.shape[axis]}"
                )

    @classmethod
    def f32(cls, values) -> "Tensor":
        return cls(DType.F32, np.asarray(values, dtype=np.float32))

    @classmethod
    def i32(cls, values) -> "Tensor":
        return cls(DType.I32, np.asarray(values, dtype=np.int32))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def nbytes(self) -> int:
        return int(self.array.nbytes)

    def to_bytes(self) -> bytes:
        return self.array.tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.to_bytes() == other.to_bytes()
            and self.quant == other.quant
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"Tensor({self.dtype.value}, shape={self.shape})"


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _finite_values(x: Tensor) -> np.ndarray:
    values = x.array.astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(index)
    return values


def _normalize_axis(axis: Optional[int], ndim: int) -> int:
    if axis is None or not -ndim <= axis < ndim:
        raise QuantizationError(f"Invalid channel axis {axis} for a {ndim}-d tensor")
    return axis % ndim


def _channel_shape(ndim: int, axis: int, extent: int) -> Tuple[int, ...]:
    shape = [1] * ndim
    shape[axis] = extent
    return tuple(shape)


def _scale_array(qp: QuantParams, ndim: int) -> np.ndarray:
    scale = np.asarray(qp.scale, dtype=np.float64)
    if qp.per_channel:
        axis = qp.channel_axis % ndim
        return scale.reshape(_channel_shape(ndim, axis, scale.size))
    return scale.reshape(())


### CALIBRATION ###

def calibrate(
    samples: Sequence[Tensor], per_channel: bool = False, channel_axis: Optional[int] = None
):
    """Running min/max over all samples, per tensor or per channel slice."""
    if not samples:
        raise CalibrationError("Calibration requires at least one sample")
    lo = hi = None
    for sample in samples:
        values = sample.array.astype(np.float64)
        if per_channel:
            axis = _normalize_axis(channel_axis, values.ndim)
            reduce = tuple(i for i in range(values.ndim) if i != axis)
            s_lo, s_hi = values.min(axis=reduce), values.max(axis=reduce)
        else:
            s_lo, s_hi = values.min(), values.max()
        if lo is None:
            lo, hi = s_lo, s_hi
        else:
            if np.shape(lo) != np.shape(s_lo):
                raise CalibrationError("Calibration samples disagree on channel count")
            lo, hi = np.minimum(lo, s_lo), np.maximum(hi, s_hi)
    if per_channel:
        return lo, hi
    return float(lo), float(hi)


def affine_params(calib_min: float, calib_max: float) -> QuantParams:
    if not calib_min < calib_max:
        raise CalibrationError(
            f"calib_min ({calib_min}) must be strictly below calib_max ({calib_max})"
        )
    scale = (calib_max - calib_min) / U8_LEVELS
    zero_point = int(np.clip(round_half_away(-calib_min / scale), 0, U8_LEVELS))
    return QuantParams(
        scheme=QuantScheme.PER_TENSOR_AFFINE,
        scale=[scale],
        zero_point=zero_point,
        calib_min=[float(calib_min)],
        calib_max=[float(calib_max)],
    )


def symmetric_params(
    calib_min, calib_max, per_channel: bool = False, channel_axis: Optional[int] = None
) -> Tuple[QuantParams, Tuple[str, ...]]:
    lo = np.atleast_1d(np.asarray(calib_min, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(calib_max, dtype=np.float64))
    scale = np.maximum(np.abs(lo), np.abs(hi)) / I8_LIMIT
    warnings: Tuple[str, ...] = ()
    degenerate = ~(scale > 0)
    if degenerate.any():
        scale[degenerate] = 1.0
        where = "tensor" if not per_channel else f"channels {np.flatnonzero(degenerate).tolist()}"
        warnings = (f"degenerate all-zero calibration for {where}; scale forced to 1",)
        logger.warning(warnings[0])
    params = QuantParams(
        scheme=QuantScheme.PER_CHANNEL_SYMMETRIC if per_channel else QuantScheme.PER_TENSOR_SYMMETRIC,
        scale=scale.tolist(),
        zero_point=0,
        channel_axis=channel_axis if per_channel else None,
        calib_min=lo.tolist(),
        calib_max=hi.tolist(),
    )
    return params, warnings


### QUANTIZE / DEQUANTIZE ###

def quantize_affine(x: Tensor, qp: QuantParams) -> Tensor:
    if qp.scheme != QuantScheme.PER_TENSOR_AFFINE:
        raise QuantizationError(f"quantize_affine needs PerTensorAffine, got {qp.scheme.value}")
    lo, hi = qp.calib_min[0], qp.calib_max[0]
    if not lo < hi:
        raise CalibrationError(f"calib_min ({lo}) must be strictly below calib_max ({hi})")
    values = _finite_values(x)
    q = round_half_away((values - lo) / (hi - lo) * U8_LEVELS)
    return Tensor(DType.U8, np.clip(q, 0, U8_LEVELS).astype(np.uint8), qp)


def dequantize_affine(q: Tensor) -> Tensor:
    if q.quant is None or q.quant.scheme != QuantScheme.PER_TENSOR_AFFINE:
        raise QuantizationError("dequantize_affine needs PerTensorAffine quantization parameters")
    lo, hi = q.quant.calib_min[0], q.quant.calib_max[0]
    values = q.array.astype(np.float64) / U8_LEVELS * (hi - lo) + lo
    return Tensor(DType.F32, values.astype(np.float32))


def quantize_symmetric(
    x: Tensor,
    per_channel: bool = False,
    channel_axis: Optional[int] = None,
    calib=None,
) -> Tensor:
    """Quantize to I8 on [-127, 127]; calib defaults to the tensor's own min/max."""
    if x.array.size == 0:
        raise QuantizationError("Cannot quantize an empty tensor")
    values = _finite_values(x)
    axis = _normalize_axis(channel_axis, values.ndim) if per_channel else None
    if calib is None:
        calib = calibrate([x], per_channel, axis)
    qp, warnings = symmetric_params(calib[0], calib[1], per_channel, axis)
    if per_channel and len(qp.scale) != values.shape[axis]:
        raise QuantizationError(
            f"{len(qp.scale)} calibrated channels for extent {values.shape[axis]}"
        )
    return _quantize_symmetric_with(values, qp, warnings)


def _quantize_symmetric_with(values: np.ndarray, qp: QuantParams, warnings=()) -> Tensor:
    scale = _scale_array(qp, values.ndim)
    q = np.clip(round_half_away(values / scale), -I8_LIMIT, I8_LIMIT)
    return Tensor(DType.I8, q.astype(np.int8), qp, tuple(warnings))


def quantize(x: Tensor, qp: QuantParams) -> Tensor:
    """Quantize with existing parameters, dispatching on the scheme."""
    if qp.scheme == QuantScheme.PER_TENSOR_AFFINE:
        return quantize_affine(x, qp)
    return _quantize_symmetric_with(_finite_values(x), qp)


def dequantize(t: Tensor) -> Tensor:
    """Float view of any tensor; F32 passes through."""
    if t.dtype == DType.F32:
        return t
    if t.dtype == DType.I32:
        return Tensor(DType.F32, t.array.astype(np.float32))
    if t.quant.scheme == QuantScheme.PER_TENSOR_AFFINE:
        return dequantize_affine(t)
    values = (t.array.astype(np.float64) - t.quant.zero_point) * _scale_array(t.quant, t.array.ndim)
    return Tensor(DType.F32, values.astype(np.float32))


def as_float(t: Tensor) -> np.ndarray:
    return dequantize(t).array.astype(np.float64)


### .ten FILE ###

def _quant_json(qp: QuantParams) -> bytes:
    payload = json.loads(qp.json())
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_tensor(t: Tensor) -> bytes:
    shape = t.shape
    parts = [
        MAGIC,
        struct.pack("<BBxx", DTYPE_CODES[t.dtype], len(shape)),
        struct.pack(f"<{len(shape)}I", *shape),
        t.to_bytes(),
    ]
    if t.quant is not None:
        blob = _quant_json(t.quant)
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def decode_tensor(buffer: bytes, source: str = "<bytes>") -> Tensor:
    if len(buffer) < 8 or buffer[:4] != MAGIC:
        raise TensorFormatError(f"{source}: not a TEN0 tensor file")
    code, ndim = struct.unpack_from("<BB", buffer, 4)
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"{source}: unknown dtype code {code}")
    if buffer[6:8] != b"\x00\x00":
        raise TensorFormatError(f"{source}: reserved header bytes must be zero")
    offset = 8
    if len(buffer) < offset + 4 * ndim:
        raise TensorFormatError(f"{source}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", buffer, offset)
    offset += 4 * ndim

    dtype = CODE_DTYPES[code]
    np_dtype = NUMPY_DTYPES[dtype]
    length = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
    if len(buffer) < offset + length:
        raise TensorFormatError(f"{source}: truncated element data")
    array = np.frombuffer(buffer, dtype=np_dtype, count=length // np_dtype.itemsize, offset=offset)
    offset += length

    quant = None
    if dtype in (DType.U8, DType.I8):
        if len(buffer) < offset + 4:
            raise TensorFormatError(f"{source}: missing quantization trailer")
        (blob_length,) = struct.unpack_from("<I", buffer, offset)
        offset += 4
        blob = buffer[offset:offset + blob_length]
        if len(blob) != blob_length:
            raise TensorFormatError(f"{source}: truncated quantization trailer")
        offset += blob_length
        try:
            quant = QuantParams(**json.loads(blob.decode("utf-8")))
        except (ValueError, ValidationError) as exc:
            raise TensorFormatError(f"{source}: invalid quantization trailer: {exc}")
    if offset != len(buffer):
        raise TensorFormatError(f"{source}: {len(buffer) - offset} trailing bytes")
    try:
        return Tensor(dtype, array.reshape(shape), quant)
    except QuantizationError as exc:
        raise TensorFormatError(f"{source}: {exc.detail}")


def save_tensor(path: Union[str, Path], t: Tensor) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: Union[str, Path]) -> Tensor:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as exc:
        raise TensorFormatError(f"Cannot read tensor file {path}: {exc}")
    return decode_tensor(buffer, str(path))
