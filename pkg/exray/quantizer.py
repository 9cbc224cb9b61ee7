"""Post-training int8 quantization of float graphs."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from exray.errors import CalibrationError, QuantizationError
from exray.graph import Graph, Layer, build_graph
from exray.models import Capture, DType, LayerSpec, LayerType, QuantParams, ResolverKind
from exray.runtime import KernelResolver, infer
from exray.tensor import Tensor, quantize_symmetric, round_half_away, symmetric_params

logger = logging.getLogger(__name__)

ACCUMULATING_LAYERS = (
    LayerType.CONV2D,
    LayerType.DEPTHWISE_CONV2D,
    LayerType.FULLY_CONNECTED,
    LayerType.MEAN,
    LayerType.ADD,
)
PASSTHROUGH_LAYERS = (LayerType.AVERAGE_POOL2D, LayerType.PAD)
I32_LIMIT = 2 ** 31 - 1

# weight layouts: conv (out, kh, kw, in), depthwise (kh, kw, c), fc (out, in)
WEIGHT_CHANNEL_AXIS = {
    LayerType.CONV2D: 0,
    LayerType.DEPTHWISE_CONV2D: 2,
    LayerType.FULLY_CONNECTED: 0,
}


class _RangeObserver:
    """Running min/max of one tensor across calibration frames, overall and per output channel."""

    def __init__(self):
        self.lo = self.hi = None
        self.channel_lo = self.channel_hi = None

    def observe(self, t: Tensor) -> None:
        values = t.array.astype(np.float64)
        channels = values.reshape(-1, values.shape[-1])
        lo, hi = float(values.min()), float(values.max())
        c_lo, c_hi = channels.min(axis=0), channels.max(axis=0)
        if self.lo is None:
            self.lo, self.hi, self.channel_lo, self.channel_hi = lo, hi, c_lo, c_hi
            return
        self.lo, self.hi = min(self.lo, lo), max(self.hi, hi)
        self.channel_lo = np.minimum(self.channel_lo, c_lo)
        self.channel_hi = np.maximum(self.channel_hi, c_hi)

    def params(self, per_channel: bool = False, ndim: int = 1) -> QuantParams:
        if per_channel:
            qp, _ = symmetric_params(self.channel_lo, self.channel_hi, True, ndim - 1)
        else:
            qp, _ = symmetric_params(self.lo, self.hi)
        return qp


def _observe(graph: Graph, calibration_inputs: Sequence[Tensor]) -> Tuple[_RangeObserver, List[_RangeObserver]]:
    resolver = KernelResolver(ResolverKind.REFERENCE)
    inputs = _RangeObserver()
    layers = [_RangeObserver() for _ in graph.layers]
    for x in tqdm(calibration_inputs, desc="calibrating", unit="frame", disable=None):
        result = infer(graph, x, resolver, Capture.PER_LAYER)
        inputs.observe(x)
        for observer, output in zip(layers, result.layer_outputs):
            observer.observe(output)
    return inputs, layers


def _quantize_bias(bias: Optional[Tensor], input_scale: float, weight_qp: QuantParams) -> Optional[Tensor]:
    if bias is None:
        return None
    scale = input_scale * np.asarray(weight_qp.scale, dtype=np.float64)
    q = round_half_away(bias.array.astype(np.float64) / scale)
    return Tensor.i32(np.clip(q, -I32_LIMIT - 1, I32_LIMIT))


def _terminal_layer(graph: Graph) -> Optional[int]:
    """Index of the last layer when it accumulates and nothing but the output consumes it."""
    last = graph.layers[-1]
    if last.type not in ACCUMULATING_LAYERS:
        return None
    if any(layer.spec.operand == last.index for layer in graph.layers):
        return None
    return last.index


def quantize_graph(graph: Graph, calibration_inputs: Sequence[Tensor], per_channel: bool = False) -> Graph:
    """Return an int8 graph `Quantize -> layers... -> Dequantize` calibrated on float inputs.

    Weights use symmetric int8 (per output channel when `per_channel`), biases I32 at
    input_scale * weight_scale, activations per-tensor symmetric. With `per_channel` the
    final accumulating layer also gets per-channel output parameters.
    """
    if graph.is_quantized:
        raise QuantizationError(f"Graph {graph.name} is already quantized")
    if graph.input_dtype != DType.F32:
        raise QuantizationError(f"Graph {graph.name} must take F32 input, got {graph.input_dtype.value}")
    calibration_inputs = list(calibration_inputs)
    if not calibration_inputs:
        raise CalibrationError("Calibration requires at least one input frame")

    input_range, ranges = _observe(graph, calibration_inputs)
    terminal = _terminal_layer(graph) if per_channel else None

    input_qp = input_range.params()
    layers = [Layer(LayerSpec(index=0, type=LayerType.QUANTIZE, output_quant=input_qp))]
    activation_qps = []
    for layer in graph.layers:
        spec = layer.spec
        in_qp = activation_qps[spec.index - 1] if spec.index > 0 else input_qp
        weights = bias = None
        if spec.type in WEIGHT_CHANNEL_AXIS:
            weights = quantize_symmetric(layer.weights, per_channel, WEIGHT_CHANNEL_AXIS[spec.type])
            for warning in weights.warnings:
                logger.warning("Layer %d weights: %s", spec.index, warning)
            bias = _quantize_bias(layer.bias, in_qp.scale[0], weights.quant)

        if spec.type in PASSTHROUGH_LAYERS:
            out_qp = in_qp
        elif spec.type == LayerType.SOFTMAX:
            out_qp, _ = symmetric_params(0.0, 1.0)
        elif spec.index == terminal:
            out_qp = ranges[spec.index].params(per_channel=True, ndim=len(graph.shapes[spec.index]))
        else:
            out_qp = ranges[spec.index].params()
        activation_qps.append(out_qp)

        update = {"index": spec.index + 1, "output_quant": out_qp, "weights": None, "bias": None}
        if spec.operand is not None:
            update["operand"] = spec.operand + 1
        layers.append(Layer(spec.copy(update=update), weights, bias))
    layers.append(Layer(LayerSpec(index=len(layers), type=LayerType.DEQUANTIZE)))

    quantized = build_graph(f"{graph.name}_int8", graph.input_shape, layers, DType.F32)
    logger.info(
        "Quantized %s: %d calibration frames, %s weights, %d -> %d weight bytes",
        graph.name,
        len(calibration_inputs),
        "per-channel" if per_channel else "per-tensor",
        graph.weight_bytes,
        quantized.weight_bytes,
    )
    return quantized

