"""Serialized layer graphs: validation, shape inference, loading and saving."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from exray.errors import GraphLoadError, TensorFormatError
from exray.models import DType, LayerSpec, LayerType, ModelFile, QuantParams
from exray.tensor import NUMPY_DTYPES, Tensor, encode_tensor, load_tensor, save_tensor

logger = logging.getLogger(__name__)

MODEL_FILE = "model.json"
BLOB_DIR = "blobs"

WEIGHTED_LAYERS = (LayerType.CONV2D, LayerType.DEPTHWISE_CONV2D, LayerType.FULLY_CONNECTED)
SPATIAL_LAYERS = (
    LayerType.CONV2D,
    LayerType.DEPTHWISE_CONV2D,
    LayerType.AVERAGE_POOL2D,
    LayerType.MEAN,
    LayerType.PAD,
)

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class Layer:
    spec: LayerSpec
    weights: Optional[Tensor] = None
    bias: Optional[Tensor] = None

    @property
    def index(self) -> int:
        return self.spec.index

    @property
    def type(self) -> LayerType:
        return self.spec.type


@dataclass(frozen=True)
class Graph:
    name: str
    input_shape: Shape
    input_dtype: DType
    layers: Tuple[Layer, ...]
    output_index: int
    input_quant: Optional[QuantParams] = None
    shapes: Tuple[Shape, ...] = field(default=(), compare=False)
    dtypes: Tuple[DType, ...] = field(default=(), compare=False)

    @property
    def is_quantized(self) -> bool:
        return any(layer.type == LayerType.QUANTIZE for layer in self.layers) or self.input_dtype == DType.I8

    @property
    def weight_bytes(self) -> int:
        return sum(
            tensor.nbytes
            for layer in self.layers
            for tensor in (layer.weights, layer.bias)
            if tensor is not None
        )

    @cached_property
    def analytic_memory_bytes(self) -> int:
        """Weight bytes plus the peak of simultaneously live activation buffers."""
        sizes = [int(np.prod(shape)) * NUMPY_DTYPES[dtype].itemsize for shape, dtype in zip(self.shapes, self.dtypes)]
        input_bytes = int(np.prod(self.input_shape)) * NUMPY_DTYPES[self.input_dtype].itemsize
        last_use = {}
        for layer in self.layers:
            if layer.spec.operand is not None:
                last_use[layer.spec.operand] = layer.index
        peak = 0
        for layer in self.layers:
            i = layer.index
            live = (sizes[i - 1] if i > 0 else input_bytes) + sizes[i]
            live += sum(sizes[j] for j, last in last_use.items() if j < i - 1 and last >= i)
            peak = max(peak, live)
        return self.weight_bytes + peak

    def digest(self) -> str:
        sha = hashlib.sha256()
        sha.update(json.dumps(json.loads(to_model_file(self).json()), sort_keys=True).encode("utf-8"))
        for layer in self.layers:
            for tensor in (layer.weights, layer.bias):
                if tensor is not None:
                    sha.update(encode_tensor(tensor))
        return sha.hexdigest()


def _conv_output(size: int, pad: int, kernel: int, stride: int) -> int:
    return (size + pad - kernel) // stride + 1


def _spatial_input(layer: LayerSpec, shape: Shape) -> Tuple[int, int, int]:
    if len(shape) != 3:
        raise GraphLoadError(f"{layer.type.value} needs an HxWxC input, got {shape}", layer.index)
    return shape


def _layer_shape(layer: Layer, shape: Shape, shapes: List[Shape]) -> Shape:
    spec = layer.spec
    top, bottom, left, right = spec.padding
    sh, sw = spec.stride
    if sh < 1 or sw < 1:
        raise GraphLoadError(f"stride must be positive, got {spec.stride}", spec.index)

    if spec.type in WEIGHTED_LAYERS and layer.weights is None:
        raise GraphLoadError(f"{spec.type.value} requires weights", spec.index)
    weights = layer.weights.shape if layer.weights is not None else None

    if spec.type == LayerType.CONV2D:
        h, w, c = _spatial_input(spec, shape)
        if len(weights) != 4:
            raise GraphLoadError(f"Conv2D weights must be (out, kh, kw, in), got {weights}", spec.index)
        out_c, kh, kw, in_c = weights
        if in_c != c:
            raise GraphLoadError(f"Conv2D weights have {in_c} input channels, input has {c}", spec.index)
        result = (_conv_output(h, top + bottom, kh, sh), _conv_output(w, left + right, kw, sw), out_c)
    elif spec.type == LayerType.DEPTHWISE_CONV2D:
        h, w, c = _spatial_input(spec, shape)
        if len(weights) != 3:
            raise GraphLoadError(f"DepthwiseConv2D weights must be (kh, kw, c), got {weights}", spec.index)
        kh, kw, wc = weights
        if wc != c:
            raise GraphLoadError(f"DepthwiseConv2D weights have {wc} channels, input has {c}", spec.index)
        result = (_conv_output(h, top + bottom, kh, sh), _conv_output(w, left + right, kw, sw), c)
    elif spec.type == LayerType.FULLY_CONNECTED:
        n_in = int(np.prod(shape))
        if len(weights) != 2 or weights[1] != n_in:
            raise GraphLoadError(f"FullyConnected weights {weights} do not match {n_in} inputs", spec.index)
        result = (weights[0],)
    elif spec.type == LayerType.AVERAGE_POOL2D:
        h, w, c = _spatial_input(spec, shape)
        if spec.pool is None:
            raise GraphLoadError("AveragePool2D requires a pool window", spec.index)
        ph, pw = spec.pool
        if ph > h + top + bottom or pw > w + left + right:
            raise GraphLoadError(f"Pool window {spec.pool} larger than padded input {shape}", spec.index)
        result = (_conv_output(h, top + bottom, ph, sh), _conv_output(w, left + right, pw, sw), c)
    elif spec.type == LayerType.MEAN:
        result = (_spatial_input(spec, shape)[2],)
    elif spec.type == LayerType.PAD:
        h, w, c = _spatial_input(spec, shape)
        result = (h + top + bottom, w + left + right, c)
    elif spec.type == LayerType.ADD:
        operand = spec.operand
        if operand is None or not 0 <= operand < spec.index:
            raise GraphLoadError(f"Add must reference a strictly earlier layer, got {operand}", spec.index)
        if shapes[operand] != tuple(shape):
            raise GraphLoadError(
                f"Add operand layer {operand} has shape {shapes[operand]}, input has {shape}", spec.index
            )
        result = tuple(shape)
    else:
        result = tuple(shape)

    if spec.type in (LayerType.CONV2D, LayerType.DEPTHWISE_CONV2D, LayerType.FULLY_CONNECTED):
        out_c = result[-1]
        if layer.bias is not None and layer.bias.shape != (out_c,):
            raise GraphLoadError(f"bias shape {layer.bias.shape} does not match {out_c} outputs", spec.index)
    if spec.kernel is not None and spec.type in (LayerType.CONV2D, LayerType.DEPTHWISE_CONV2D):
        kernel = weights[1:3] if spec.type == LayerType.CONV2D else weights[0:2]
        if tuple(kernel) != tuple(spec.kernel):
            raise GraphLoadError(f"kernel {spec.kernel} does not match weights {weights}", spec.index)
    if any(extent < 1 for extent in result):
        raise GraphLoadError(f"output shape {result} is empty", spec.index)
    return tuple(int(extent) for extent in result)


def _layer_dtype(layer: Layer, dtype: DType) -> DType:
    if layer.type == LayerType.QUANTIZE:
        return DType.I8
    if layer.type == LayerType.DEQUANTIZE:
        return DType.F32
    return dtype


def infer_shapes(input_shape: Sequence[int], layers: Sequence[Layer]) -> List[Shape]:
    shapes: List[Shape] = []
    shape = tuple(input_shape)
    for layer in layers:
        shape = _layer_shape(layer, shape, shapes)
        shapes.append(shape)
    return shapes


def build_graph(
    name: str,
    input_shape: Sequence[int],
    layers: Sequence[Layer],
    input_dtype: DType = DType.F32,
    input_quant: Optional[QuantParams] = None,
    output_index: Optional[int] = None,
) -> Graph:
    if not layers:
        raise GraphLoadError("Graph has no layers")
    for position, layer in enumerate(layers):
        if layer.index != position:
            raise GraphLoadError(f"layer indices must be dense and ordered, found {layer.index} at {position}", layer.index)
    if output_index is None:
        output_index = len(layers) - 1
    if output_index != len(layers) - 1:
        raise GraphLoadError(f"output layer must be the last layer, got {output_index}")

    shapes = infer_shapes(input_shape, layers)
    dtypes, dtype = [], DType(input_dtype)
    for layer in layers:
        dtype = _layer_dtype(layer, dtype)
        dtypes.append(dtype)
    return Graph(
        name=name,
        input_shape=tuple(input_shape),
        input_dtype=DType(input_dtype),
        layers=tuple(layers),
        output_index=output_index,
        input_quant=input_quant,
        shapes=tuple(shapes),
        dtypes=tuple(dtypes),
    )


### MODEL FILES ###

def _blob_name(index: int, role: str) -> str:
    return f"{BLOB_DIR}/L{index:03d}_{role}.ten"


def to_model_file(graph: Graph) -> ModelFile:
    specs = []
    for layer in graph.layers:
        update = {
            "weights": _blob_name(layer.index, "weights") if layer.weights is not None else None,
            "bias": _blob_name(layer.index, "bias") if layer.bias is not None else None,
        }
        specs.append(layer.spec.copy(update=update))
    return ModelFile(
        name=graph.name,
        input_shape=list(graph.input_shape),
        input_dtype=graph.input_dtype,
        input_quant=graph.input_quant,
        layers=specs,
        output_index=graph.output_index,
    )


def save_graph(graph: Graph, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    (directory / BLOB_DIR).mkdir(parents=True, exist_ok=True)
    model = to_model_file(graph)
    for layer, spec in zip(graph.layers, model.layers):
        if layer.weights is not None:
            save_tensor(directory / spec.weights, layer.weights)
        if layer.bias is not None:
            save_tensor(directory / spec.bias, layer.bias)
    (directory / MODEL_FILE).write_text(model.json(indent=2), encoding="utf-8")
    return directory


def _load_blob(root: Path, ref: Optional[str], index: int) -> Optional[Tensor]:
    if ref is None:
        return None
    path = root / ref
    if not path.is_file():
        raise GraphLoadError(f"missing blob {ref}", index)
    try:
        return load_tensor(path)
    except TensorFormatError as exc:
        raise GraphLoadError(exc.detail, index)


def load_graph(path: Union[str, Path]) -> Graph:
    path = Path(path)
    model_path = path / MODEL_FILE if path.is_dir() else path
    root = model_path.parent
    try:
        payload = json.loads(model_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise GraphLoadError(f"Cannot read model file {model_path}: {exc}")
    except ValueError as exc:
        raise GraphLoadError(f"Model file {model_path} is not valid JSON: {exc}")
    try:
        model = ModelFile(**payload)
    except (ValidationError, TypeError) as exc:
        raise GraphLoadError(f"Invalid model file {model_path}: {exc}")

    layers = [
        Layer(
            spec=spec.copy(update={"weights": None, "bias": None}),
            weights=_load_blob(root, spec.weights, spec.index),
            bias=_load_blob(root, spec.bias, spec.index),
        )
        for spec in model.layers
    ]
    graph = build_graph(
        model.name,
        model.input_shape,
        layers,
        input_dtype=model.input_dtype,
        input_quant=model.input_quant,
        output_index=model.output_index,
    )
    logger.info("Loaded graph %s with %d layers", graph.name, len(graph.layers))
    return graph
