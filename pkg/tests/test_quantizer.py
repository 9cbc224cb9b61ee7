import numpy as np
import pytest

from exray.errors import CalibrationError, QuantizationError
from exray.models import Capture, DType, LayerType, QuantScheme
from exray.quantizer import quantize_graph
from exray.runtime import infer
from exray.synth import GraphBuilder, residual_pool_graph, squash_graph
from exray.tensor import Tensor, as_float


def _inputs(rng, shape, count=4):
    frames = [rng.uniform(-1, 1, shape) for _ in range(count)]
    frames[0].flat[0], frames[0].flat[1] = -1.0, 1.0
    return [Tensor.f32(f) for f in frames]


def test_structure_of_quantized_graph(rng):
    graph = residual_pool_graph(blocks=2, input_shape=(6, 6, 3))
    quantized = quantize_graph(graph, _inputs(rng, (6, 6, 3)))
    types = [layer.type for layer in quantized.layers]
    assert types[0] == LayerType.QUANTIZE and types[-1] == LayerType.DEQUANTIZE
    assert types[1:-1] == [layer.type for layer in graph.layers]
    assert quantized.name == "residual_pool_int8"
    assert quantized.is_quantized
    conv = quantized.layers[1]
    assert conv.weights.dtype == DType.I8 and conv.bias.dtype == DType.I32
    assert quantized.layers[3].spec.operand == graph.layers[2].spec.operand + 1
    # average pooling keeps its input parameters
    assert quantized.layers[2].spec.output_quant == conv.spec.output_quant
    assert all(
        layer.spec.output_quant.scheme == QuantScheme.PER_TENSOR_SYMMETRIC for layer in quantized.layers[:-1]
    )


def test_identity_conv_round_trips_within_half_step(rng):
    builder = GraphBuilder("identity", (6, 6, 3))
    builder.conv(3, kernel=1, weights=np.eye(3).reshape(3, 1, 1, 3), bias=np.zeros(3))
    quantized = quantize_graph(builder.build(), _inputs(rng, (6, 6, 3)))
    x = Tensor.f32(rng.uniform(-1, 1, (6, 6, 3)))
    out = infer(quantized, x).output
    assert out.dtype == DType.F32
    step = quantized.layers[0].spec.output_quant.scale[0]
    assert np.max(np.abs(out.array.astype(np.float64) - x.array)) <= step / 2 + 1e-6


def test_per_tensor_squashes_small_channel(rng):
    graph = squash_graph(in_c=4)
    inputs = _inputs(rng, (8, 8, 4))
    per_tensor = quantize_graph(graph, inputs)
    x = inputs[1]
    out = infer(per_tensor, x).output.array
    assert np.all(out[..., 1] == 0)
    assert np.any(out[..., 0] != 0)


def test_per_channel_preserves_small_channel(rng):
    graph = squash_graph(in_c=4)
    inputs = _inputs(rng, (8, 8, 4))
    per_channel = quantize_graph(graph, inputs, per_channel=True)
    terminal = per_channel.layers[1].spec.output_quant
    assert terminal.scheme == QuantScheme.PER_CHANNEL_SYMMETRIC
    assert terminal.channel_axis == 2
    assert per_channel.layers[1].weights.quant.channel_axis == 0

    x = inputs[1]
    reference = infer(graph, x).output.array[..., 1].astype(np.float64)
    out = infer(per_channel, x).output.array[..., 1].astype(np.float64)
    assert np.any(out != 0)
    assert np.max(np.abs(out - reference)) <= 0.05 * np.max(np.abs(reference))


def test_per_channel_keeps_inner_activations_per_tensor(rng):
    builder = GraphBuilder("two_convs", (5, 5, 3))
    builder.conv(4, kernel=3)
    builder.conv(2, kernel=1)
    quantized = quantize_graph(builder.build(), _inputs(rng, (5, 5, 3)), per_channel=True)
    assert quantized.layers[1].spec.output_quant.scheme == QuantScheme.PER_TENSOR_SYMMETRIC
    assert quantized.layers[1].weights.quant.scheme == QuantScheme.PER_CHANNEL_SYMMETRIC
    assert quantized.layers[2].spec.output_quant.scheme == QuantScheme.PER_CHANNEL_SYMMETRIC


def test_softmax_output_covers_unit_interval(rng):
    builder = GraphBuilder("classifier", (4, 4, 3))
    builder.mean()
    builder.fc(3)
    builder.softmax()
    quantized = quantize_graph(builder.build(), _inputs(rng, (4, 4, 3)))
    qp = quantized.layers[3].spec.output_quant
    assert qp.calib_min == [0.0] and qp.calib_max == [1.0]
    probabilities = infer(quantized, _inputs(rng, (4, 4, 3), 1)[0], capture=Capture.PER_LAYER).output.array
    assert probabilities.sum() == pytest.approx(1.0, abs=0.02)


def test_quantize_rejects_bad_requests(rng):
    graph = squash_graph()
    with pytest.raises(CalibrationError):
        quantize_graph(graph, [])
    quantized = quantize_graph(graph, _inputs(rng, (8, 8, 4), 1))
    with pytest.raises(QuantizationError):
        quantize_graph(quantized, _inputs(rng, (8, 8, 4), 1))


def test_bias_is_quantized_at_product_scale(rng):
    graph = residual_pool_graph(blocks=1, input_shape=(4, 4, 3))
    quantized = quantize_graph(graph, _inputs(rng, (4, 4, 3)))
    conv = quantized.layers[1]
    scale = quantized.layers[0].spec.output_quant.scale[0] * conv.weights.quant.scale[0]
    restored = conv.bias.array * scale
    assert np.allclose(restored, graph.layers[0].bias.array, atol=scale)
    assert np.allclose(as_float(conv.weights), graph.layers[0].weights.array, atol=conv.weights.quant.scale[0])
