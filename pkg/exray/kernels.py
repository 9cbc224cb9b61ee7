"""Layer kernels: float and int8 paths, naive reference and im2col optimized variants.

Int8 accumulation is carried out exactly in int64 and then limited to the accumulator
width, so both resolvers produce identical integers unless a fault is injected.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from exray.errors import InferenceError, QuantizationError
from exray.graph import Layer
from exray.models import Activation, DType, FaultMode, LayerType, QuantParams, ResolverKind
from exray.tensor import I8_LIMIT, Tensor, dequantize, quantize, round_half_away

I32_MIN, I32_MAX = -(2 ** 31), 2 ** 31 - 1
I16_MIN, I16_MAX = -(2 ** 15), 2 ** 15 - 1
OPTIMIZED_BLOCK = 8


@dataclass(frozen=True)
class KernelContext:
    kind: ResolverKind
    faults: FrozenSet[FaultMode] = frozenset()
    outputs: List[Tensor] = field(default_factory=list)

    @property
    def reference(self) -> bool:
        return self.kind == ResolverKind.REFERENCE


### INTEGER HELPERS ###

def limit_accumulator(acc: np.ndarray, faults: FrozenSet[FaultMode]) -> np.ndarray:
    """Bring an exact int64 sum into the accumulator width."""
    if FaultMode.NARROW_ACCUMULATOR in faults:
        return np.clip(acc, I16_MIN, I16_MAX)
    return _limit_i32(acc, faults)


def _limit_i32(acc: np.ndarray, faults: FrozenSet[FaultMode]) -> np.ndarray:
    if FaultMode.WRAP_ACCUMULATOR in faults:
        return (acc - I32_MIN) % (2 ** 32) + I32_MIN
    return np.clip(acc, I32_MIN, I32_MAX)


def _round(values: np.ndarray, faults: FrozenSet[FaultMode]) -> np.ndarray:
    if FaultMode.TRUNCATE_REQUANT in faults:
        return np.trunc(values)
    return round_half_away(values)


def _channel_scale(qp: QuantParams) -> np.ndarray:
    """Scale broadcastable over the last (channel) axis."""
    return np.asarray(qp.scale, dtype=np.float64)


def _activation_bounds(activation: Activation, qp: QuantParams):
    lo = np.full(len(qp.scale), -I8_LIMIT, dtype=np.float64)
    hi = np.full(len(qp.scale), I8_LIMIT, dtype=np.float64)
    if activation in (Activation.RELU, Activation.RELU6):
        lo = np.maximum(lo, qp.zero_point)
    if activation == Activation.RELU6:
        hi = np.minimum(hi, qp.zero_point + round_half_away(6.0 / _channel_scale(qp)))
    if len(qp.scale) == 1:
        return lo[0], hi[0]
    return lo, hi


def requantize(
    acc: np.ndarray,
    multiplier,
    out_qp: QuantParams,
    activation: Activation,
    faults: FrozenSet[FaultMode],
) -> np.ndarray:
    y = _round(acc.astype(np.float64) * multiplier, faults) + out_qp.zero_point
    lo, hi = _activation_bounds(activation, out_qp)
    return np.clip(y, lo, hi).astype(np.int8)


def _apply_float_activation(values: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.RELU:
        return np.maximum(values, 0.0)
    if activation == Activation.RELU6:
        return np.clip(values, 0.0, 6.0)
    return values


def _is_int8(layer: Layer, x: Tensor) -> bool:
    weights = layer.weights
    if x.dtype == DType.I8:
        if weights is not None and weights.dtype != DType.I8:
            raise InferenceError(f"Layer {layer.index}: int8 input but {weights.dtype.value} weights")
        if layer.spec.output_quant is None:
            raise QuantizationError(f"Layer {layer.index}: int8 path needs output quantization parameters")
        if x.quant is None or x.quant.per_channel:
            raise QuantizationError(f"Layer {layer.index}: int8 path needs per-tensor input quantization")
        return True
    if x.dtype != DType.F32:
        raise InferenceError(f"Layer {layer.index}: unsupported input dtype {x.dtype.value}")
    if weights is not None and weights.dtype != DType.F32:
        raise InferenceError(
            f"Layer {layer.index}: float input to an int8 layer without a Quantize layer"
        )
    return False


def _centered(t: Tensor) -> np.ndarray:
    return t.array.astype(np.int64) - t.quant.zero_point


def _pad(values: np.ndarray, padding: Tuple[int, int, int, int], fill=0) -> np.ndarray:
    top, bottom, left, right = padding
    if not any(padding):
        return values
    return np.pad(values, ((top, bottom), (left, right), (0, 0)), constant_values=fill)


def _bias(layer: Layer, int8: bool):
    if layer.bias is None:
        return 0
    if int8 and layer.bias.dtype != DType.I32:
        raise QuantizationError(f"Layer {layer.index}: int8 path needs an I32 bias")
    return layer.bias.array.astype(np.int64 if int8 else np.float64)


### ACCUMULATION ###

def _conv_reference(x: np.ndarray, w: np.ndarray, stride, out_hw) -> np.ndarray:
    out_c, kh, kw, _ = w.shape
    sh, sw = stride
    oh, ow = out_hw
    out = np.zeros((oh, ow, out_c), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            window = x[i * sh:i * sh + kh, j * sw:j * sw + kw, :]
            out[i, j] = np.sum(w * window[None], axis=(1, 2, 3))
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride, out_hw) -> np.ndarray:
    sh, sw = stride
    oh, ow = out_hw
    windows = sliding_window_view(x, (kh, kw), axis=(0, 1))[::sh, ::sw][:oh, :ow]
    # (oh, ow, c, kh, kw) -> rows ordered like the (kh, kw, c) weight layout
    return windows.transpose(0, 1, 3, 4, 2).reshape(oh * ow, -1)


def _conv_optimized(x: np.ndarray, w: np.ndarray, stride, out_hw) -> np.ndarray:
    out_c = w.shape[0]
    cols = _im2col(x, w.shape[1], w.shape[2], stride, out_hw)
    matrix = w.reshape(out_c, -1)
    out = np.empty((cols.shape[0], out_c), dtype=x.dtype)
    for start in range(0, out_c, OPTIMIZED_BLOCK):
        block = matrix[start:start + OPTIMIZED_BLOCK]
        out[:, start:start + OPTIMIZED_BLOCK] = cols @ block.T
    return out.reshape(out_hw[0], out_hw[1], out_c)


def _depthwise_reference(x: np.ndarray, w: np.ndarray, stride, out_hw) -> np.ndarray:
    kh, kw, channels = w.shape
    sh, sw = stride
    oh, ow = out_hw
    out = np.zeros((oh, ow, channels), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            window = x[i * sh:i * sh + kh, j * sw:j * sw + kw, :]
            out[i, j] = np.sum(window * w, axis=(0, 1))
    return out


def _depthwise_optimized(x: np.ndarray, w: np.ndarray, stride, out_hw) -> np.ndarray:
    kh, kw, _ = w.shape
    sh, sw = stride
    oh, ow = out_hw
    windows = sliding_window_view(x, (kh, kw), axis=(0, 1))[::sh, ::sw][:oh, :ow]
    return np.einsum("ijckl,klc->ijc", windows, w)


def _fc_reference(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[0], dtype=x.dtype)
    for unit in range(w.shape[0]):
        out[unit] = np.sum(w[unit] * x)
    return out


def _fc_optimized(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return w @ x


def _window_sums(values: np.ndarray, valid: np.ndarray, pool, stride, out_hw, reference: bool):
    ph, pw = pool
    sh, sw = stride
    oh, ow = out_hw
    if reference:
        sums = np.zeros((oh, ow, values.shape[2]), dtype=values.dtype)
        counts = np.zeros((oh, ow, 1), dtype=np.int64)
        for i in range(oh):
            for j in range(ow):
                sums[i, j] = np.sum(values[i * sh:i * sh + ph, j * sw:j * sw + pw], axis=(0, 1))
                counts[i, j] = np.sum(valid[i * sh:i * sh + ph, j * sw:j * sw + pw])
        return sums, counts
    windows = sliding_window_view(values, (ph, pw), axis=(0, 1))[::sh, ::sw][:oh, :ow]
    valid_windows = sliding_window_view(valid, (ph, pw), axis=(0, 1))[::sh, ::sw][:oh, :ow]
    return windows.sum(axis=(3, 4)), valid_windows.sum(axis=(3, 4)).astype(np.int64)


def _sum_rows(rows: np.ndarray, reference: bool) -> np.ndarray:
    if not reference:
        return rows.sum(axis=0)
    total = np.zeros(rows.shape[1], dtype=rows.dtype)
    for row in rows:
        total += row
    return total


def _output_hw(layer: Layer, shape, kh: int, kw: int) -> Tuple[int, int]:
    top, bottom, left, right = layer.spec.padding
    sh, sw = layer.spec.stride
    return (shape[0] + top + bottom - kh) // sh + 1, (shape[1] + left + right - kw) // sw + 1


### KERNELS ###

def conv2d(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    int8 = _is_int8(layer, x)
    w = layer.weights
    out_hw = _output_hw(layer, x.shape, w.shape[1], w.shape[2])
    accumulate = _conv_reference if ctx.reference else _conv_optimized
    if not int8:
        values = _pad(x.array.astype(np.float64), layer.spec.padding)
        acc = accumulate(values, w.array.astype(np.float64), layer.spec.stride, out_hw) + _bias(layer, False)
        return Tensor.f32(_apply_float_activation(acc, layer.spec.activation))
    values = _pad(_centered(x), layer.spec.padding)
    acc = accumulate(values, _centered(w), layer.spec.stride, out_hw)
    return _finish_accumulation(layer, x, acc, ctx)


def depthwise_conv2d(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    int8 = _is_int8(layer, x)
    w = layer.weights
    out_hw = _output_hw(layer, x.shape, w.shape[0], w.shape[1])
    accumulate = _depthwise_reference if ctx.reference else _depthwise_optimized
    if not int8:
        values = _pad(x.array.astype(np.float64), layer.spec.padding)
        acc = accumulate(values, w.array.astype(np.float64), layer.spec.stride, out_hw) + _bias(layer, False)
        return Tensor.f32(_apply_float_activation(acc, layer.spec.activation))
    values = _pad(_centered(x), layer.spec.padding)
    acc = accumulate(values, _centered(w), layer.spec.stride, out_hw)
    return _finish_accumulation(layer, x, acc, ctx)


def fully_connected(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    int8 = _is_int8(layer, x)
    accumulate = _fc_reference if ctx.reference else _fc_optimized
    if not int8:
        acc = accumulate(x.array.astype(np.float64).ravel(), layer.weights.array.astype(np.float64))
        acc = acc + _bias(layer, False)
        return Tensor.f32(_apply_float_activation(acc, layer.spec.activation))
    acc = accumulate(_centered(x).ravel(), _centered(layer.weights))
    return _finish_accumulation(layer, x, acc, ctx)


def _finish_accumulation(layer: Layer, x: Tensor, acc: np.ndarray, ctx: KernelContext) -> Tensor:
    acc = limit_accumulator(acc, ctx.faults)
    acc = _limit_i32(acc + _bias(layer, True), ctx.faults)
    out_qp = layer.spec.output_quant
    multiplier = x.quant.scale[0] * _channel_scale(layer.weights.quant) / _channel_scale(out_qp)
    y = requantize(acc, multiplier, out_qp, layer.spec.activation, ctx.faults)
    return Tensor(DType.I8, y, out_qp)


def average_pool(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    int8 = _is_int8(layer, x)
    pool = layer.spec.pool
    out_hw = _output_hw(layer, x.shape, pool[0], pool[1])
    valid = _pad(np.ones(x.shape[:2] + (1,), dtype=np.int64), layer.spec.padding)
    if not int8:
        values = _pad(x.array.astype(np.float64), layer.spec.padding)
        sums, counts = _window_sums(values, valid, pool, layer.spec.stride, out_hw, ctx.reference)
        return Tensor.f32(sums / counts)
    values = _pad(_centered(x), layer.spec.padding)
    sums, counts = _window_sums(values, valid, pool, layer.spec.stride, out_hw, ctx.reference)
    sums = limit_accumulator(sums, ctx.faults)
    out_qp = layer.spec.output_quant
    multiplier = x.quant.scale[0] / (counts * _channel_scale(out_qp))
    return Tensor(DType.I8, requantize(sums, multiplier, out_qp, Activation.NONE, ctx.faults), out_qp)


def mean(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    int8 = _is_int8(layer, x)
    count = x.shape[0] * x.shape[1]
    if not int8:
        rows = x.array.astype(np.float64).reshape(count, -1)
        return Tensor.f32(_sum_rows(rows, ctx.reference) / count)
    sums = limit_accumulator(_sum_rows(_centered(x).reshape(count, -1), ctx.reference), ctx.faults)
    out_qp = layer.spec.output_quant
    multiplier = x.quant.scale[0] / (count * _channel_scale(out_qp))
    return Tensor(DType.I8, requantize(sums, multiplier, out_qp, Activation.NONE, ctx.faults), out_qp)


def pad(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    if x.dtype == DType.I8:
        return Tensor(DType.I8, _pad(x.array, layer.spec.padding, x.quant.zero_point), x.quant)
    if x.dtype != DType.F32:
        raise InferenceError(f"Layer {layer.index}: unsupported input dtype {x.dtype.value}")
    return Tensor.f32(_pad(x.array, layer.spec.padding))


def add(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    other = ctx.outputs[layer.spec.operand]
    if other.dtype != x.dtype:
        raise InferenceError(
            f"Layer {layer.index}: Add operands differ in dtype ({x.dtype.value} vs {other.dtype.value})"
        )
    if not _is_int8(layer, x):
        values = x.array.astype(np.float64) + other.array.astype(np.float64)
        return Tensor.f32(_apply_float_activation(values, layer.spec.activation))
    out_qp = layer.spec.output_quant
    out_scale = _channel_scale(out_qp)
    lhs = _round(_centered(x) * (x.quant.scale[0] / out_scale), ctx.faults)
    rhs = _round(_centered(other) * (other.quant.scale[0] / out_scale), ctx.faults)
    y = lhs + rhs + out_qp.zero_point
    lo, hi = _activation_bounds(layer.spec.activation, out_qp)
    return Tensor(DType.I8, np.clip(y, lo, hi).astype(np.int8), out_qp)


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    # computed in float even inside int8 graphs
    probabilities = Tensor.f32(_softmax(dequantize(x).array.astype(np.float64)))
    if x.dtype == DType.I8:
        if layer.spec.output_quant is None:
            raise QuantizationError(f"Layer {layer.index}: int8 Softmax needs output quantization parameters")
        return quantize(probabilities, layer.spec.output_quant)
    return probabilities


def quantize_layer(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    if x.dtype != DType.F32:
        raise InferenceError(f"Layer {layer.index}: Quantize expects F32 input, got {x.dtype.value}")
    if layer.spec.output_quant is None:
        raise QuantizationError(f"Layer {layer.index}: Quantize needs output quantization parameters")
    return quantize(x, layer.spec.output_quant)


def dequantize_layer(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    if x.dtype not in (DType.I8, DType.U8):
        raise InferenceError(f"Layer {layer.index}: Dequantize expects a quantized input, got {x.dtype.value}")
    return dequantize(x)


KERNELS: Dict[LayerType, Callable[[Layer, Tensor, KernelContext], Tensor]] = {
    LayerType.CONV2D: conv2d,
    LayerType.DEPTHWISE_CONV2D: depthwise_conv2d,
    LayerType.FULLY_CONNECTED: fully_connected,
    LayerType.AVERAGE_POOL2D: average_pool,
    LayerType.MEAN: mean,
    LayerType.PAD: pad,
    LayerType.ADD: add,
    LayerType.SOFTMAX: softmax,
    LayerType.QUANTIZE: quantize_layer,
    LayerType.DEQUANTIZE: dequantize_layer,
}


def run_kernel(layer: Layer, x: Tensor, ctx: KernelContext) -> Tensor:
    return KERNELS[layer.type](layer, x, ctx)
