"""Synthetic images, graphs and demo assets for desk-scale runs and test harnesses."""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from exray.graph import Graph, Layer, build_graph, infer_shapes, save_graph
from exray.imgproc import BugFamily, Image, inject_bug, run_pipeline, save_pipeline_spec, write_ppm
from exray.models import Activation, ChannelOrder, FaultMode, LayerSpec, LayerType, PipelineSpec, Resizer
from exray.runtime import infer
from exray.tensor import Tensor

logger = logging.getLogger(__name__)

DEMO_PIPELINE = PipelineSpec(
    channel_order=ChannelOrder.RGB,
    resizer=Resizer.AREA,
    target_h=24,
    target_w=24,
    norm_lo=-1.0,
    norm_hi=1.0,
    rotation=0,
)
DEMO_IMAGE_SHAPE = (40, 32)


### IMAGES ###

def textured_image(height: int, width: int, rng: np.random.Generator, dominant: Optional[int] = None) -> Image:
    """Per-pixel noise over a random gradient; `dominant` lifts one color channel above the others."""
    yy, xx = np.mgrid[0:height, 0:width]
    gradient = (yy / max(height - 1, 1))[..., None] * rng.uniform(-40, 40, 3) + (xx / max(width - 1, 1))[..., None] * rng.uniform(-40, 40, 3)
    noise = rng.uniform(0, 200, (height, width, 3))
    values = noise + gradient + 20
    if dominant is not None:
        values[..., dominant] += 60
    return Image(np.clip(values, 0, 255).astype(np.uint8))


def low_contrast_image(height: int, width: int, rng: np.random.Generator, spread: int = 6) -> Image:
    values = 128 + rng.integers(-spread, spread + 1, (height, width, 3))
    return Image(values.astype(np.uint8))


def constant_image(height: int, width: int, value: int = 128) -> Image:
    return Image(np.full((height, width, 3), value, dtype=np.uint8))


def write_dataset(
    directory: Union[str, Path],
    images: Sequence[Image],
    labels: Optional[Sequence[int]] = None,
    prefix: str = "img",
) -> List[str]:
    """Write images as `prefix_NNN.ppm` plus `labels.txt` when labels are given."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"{prefix}_{i:03d}.ppm" for i in range(len(images))]
    for name, image in zip(names, images):
        write_ppm(directory / name, image)
    if labels is not None:
        lines = [f"{name} {label}" for name, label in zip(names, labels)]
        (directory / "labels.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return names


def random_tensors(shape: Sequence[int], count: int, rng: np.random.Generator, lo: float = -1.0, hi: float = 1.0) -> Dict[str, Tensor]:
    return {f"frame_{i:03d}": Tensor.f32(rng.uniform(lo, hi, tuple(shape))) for i in range(count)}


### GRAPHS ###

class GraphBuilder:
    """Appends float layers with dense indices and tracks the running shape."""

    def __init__(self, name: str, input_shape: Sequence[int], seed: int = 0):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.rng = np.random.default_rng(seed)
        self.layers: List[Layer] = []
        self.shapes: List[Tuple[int, ...]] = []

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.shapes[-1] if self.shapes else self.input_shape

    def _append(self, weights: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None, **spec) -> int:
        index = len(self.layers)
        layer = Layer(
            LayerSpec(index=index, **spec),
            Tensor.f32(weights) if weights is not None else None,
            Tensor.f32(bias) if bias is not None else None,
        )
        self.shapes = infer_shapes(self.input_shape, self.layers + [layer])
        self.layers.append(layer)
        return index

    def _init(self, shape: Sequence[int], fan_in: int, mean: float = 0.0) -> np.ndarray:
        return (self.rng.uniform(-1.0, 1.0, tuple(shape)) + mean) * np.sqrt(3.0 / fan_in)

    @staticmethod
    def _same(kernel: int) -> Tuple[int, int, int, int]:
        lo, hi = (kernel - 1) // 2, kernel // 2
        return (lo, hi, lo, hi)

    def conv(
        self,
        out_c: int,
        kernel: int = 3,
        stride: int = 1,
        same: bool = True,
        activation: Activation = Activation.NONE,
        weights: Optional[np.ndarray] = None,
        bias: Optional[np.ndarray] = None,
        weight_mean: float = 0.0,
    ) -> int:
        in_c = self.shape[-1]
        if weights is None:
            weights = self._init((out_c, kernel, kernel, in_c), kernel * kernel * in_c, weight_mean)
        if bias is None:
            bias = self.rng.uniform(-0.1, 0.1, out_c)
        return self._append(
            weights, bias,
            type=LayerType.CONV2D, kernel=(kernel, kernel), stride=(stride, stride),
            padding=self._same(kernel) if same else (0, 0, 0, 0), activation=activation,
        )

    def depthwise(
        self,
        kernel: int = 3,
        stride: int = 1,
        same: bool = True,
        activation: Activation = Activation.NONE,
        weights: Optional[np.ndarray] = None,
        bias: Optional[np.ndarray] = None,
        weight_mean: float = 0.0,
    ) -> int:
        channels = self.shape[-1]
        if weights is None:
            weights = self._init((kernel, kernel, channels), kernel * kernel, weight_mean)
        if bias is None:
            bias = self.rng.uniform(-0.1, 0.1, channels)
        return self._append(
            weights, bias,
            type=LayerType.DEPTHWISE_CONV2D, kernel=(kernel, kernel), stride=(stride, stride),
            padding=self._same(kernel) if same else (0, 0, 0, 0), activation=activation,
        )

    def fc(self, units: int, activation: Activation = Activation.NONE, weights: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None) -> int:
        n_in = int(np.prod(self.shape))
        if weights is None:
            weights = self._init((units, n_in), n_in)
        if bias is None:
            bias = self.rng.uniform(-0.1, 0.1, units)
        return self._append(weights, bias, type=LayerType.FULLY_CONNECTED, activation=activation)

    def avg_pool(self, pool: int = 3, stride: int = 1, same: bool = True) -> int:
        return self._append(
            type=LayerType.AVERAGE_POOL2D, pool=(pool, pool), stride=(stride, stride),
            padding=self._same(pool) if same else (0, 0, 0, 0),
        )

    def mean(self) -> int:
        return self._append(type=LayerType.MEAN)

    def pad(self, padding: Tuple[int, int, int, int]) -> int:
        return self._append(type=LayerType.PAD, padding=padding)

    def add(self, operand: int, activation: Activation = Activation.NONE) -> int:
        return self._append(type=LayerType.ADD, operand=operand, activation=activation)

    def softmax(self) -> int:
        return self._append(type=LayerType.SOFTMAX)

    def build(self) -> Graph:
        return build_graph(self.name, self.input_shape, self.layers)


def squash_graph(in_c: int = 4, seed: int = 0) -> Graph:
    """1x1 conv with one ordinary output channel and one whose weights are ~1000x smaller."""
    rng = np.random.default_rng(seed)
    weights = np.zeros((2, 1, 1, in_c))
    weights[0, 0, 0] = rng.uniform(-1.0, 1.0, in_c)
    weights[0, 0, 0, 0] = 1.0
    weights[1, 0, 0] = rng.uniform(-0.001, 0.001, in_c)
    builder = GraphBuilder("squash", (8, 8, in_c), seed)
    builder.conv(2, kernel=1, weights=weights, bias=np.zeros(2))
    return builder.build()


def residual_pool_graph(blocks: int = 4, channels: int = 8, input_shape=(20, 20, 3), seed: int = 0) -> Graph:
    """Conv1x1(ReLU) then `blocks` x [AveragePool 3x3 stride 1, Add with the block input]."""
    builder = GraphBuilder("residual_pool", input_shape, seed)
    weights = builder.rng.uniform(-1.0, 1.0, (channels, 1, 1, input_shape[-1]))
    # bias keeps every output positive for inputs in [-1, 1]
    block_input = builder.conv(
        channels, kernel=1, activation=Activation.RELU, weights=weights, bias=np.abs(weights).sum(axis=(1, 2, 3))
    )
    for _ in range(blocks):
        builder.avg_pool(3)
        block_input = builder.add(block_input)
    return builder.build()


def fault_graph(seed: int, channels: int = 16, hw: int = 8) -> Graph:
    """Ten layers whose convolutions accumulate far outside the int16 range on non-negative inputs."""
    rng = np.random.default_rng(seed)
    builder = GraphBuilder(f"fault_{seed}", (hw, hw, channels), seed)
    builder.conv(channels, activation=Activation.RELU, weight_mean=0.5)
    anchor = 0
    while len(builder.layers) < 8:
        choice = rng.choice(["conv", "conv", "depthwise", "pool", "add"])
        if choice == "conv":
            builder.conv(channels, activation=Activation.RELU, weight_mean=0.5)
        elif choice == "depthwise":
            builder.depthwise(kernel=5, activation=Activation.RELU, weight_mean=1.0)
        elif choice == "pool":
            builder.avg_pool(3)
        elif len(builder.layers) - 1 > anchor:
            anchor = builder.add(anchor)
    builder.mean()
    builder.fc(10)
    return builder.build()


FAULT_LAYER_TYPES = {
    # int8 sums over at most a few hundred taps never reach 2**31, so WrapAccumulator is not injected.
    # Pool, Mean and Add sums stay inside int16, and the final FC sees only 16 signed-weight taps.
    FaultMode.NARROW_ACCUMULATOR: {LayerType.CONV2D: 64, LayerType.DEPTHWISE_CONV2D: 25, LayerType.FULLY_CONNECTED: 64},
    # Pad and Softmax never requantize.
    FaultMode.TRUNCATE_REQUANT: {
        LayerType.CONV2D: 0,
        LayerType.DEPTHWISE_CONV2D: 0,
        LayerType.FULLY_CONNECTED: 0,
        LayerType.AVERAGE_POOL2D: 0,
        LayerType.MEAN: 0,
        LayerType.ADD: 0,
    },
}


def _taps(layer: Layer) -> int:
    if layer.weights is None:
        return 0
    if layer.type == LayerType.DEPTHWISE_CONV2D:
        return int(np.prod(layer.weights.shape[:2]))
    return int(np.prod(layer.weights.shape[1:]))


def fault_targets(graph: Graph, mode: FaultMode, layer_type: Optional[LayerType] = None) -> List[int]:
    """Layers of `graph` where `mode` visibly changes the output: enough taps to overflow int16
    for NarrowAccumulator, any requantizing layer for TruncateRequant.
    SlowKernel only moves timings and has no accuracy signature.
    """
    eligible = FAULT_LAYER_TYPES.get(mode, {})
    return [
        layer.index
        for layer in graph.layers
        if layer.type in eligible
        and (layer_type is None or layer.type == layer_type)
        and _taps(layer) >= eligible[layer.type]
    ]


def random_graph(seed: int, min_layers: int = 5, max_layers: int = 20, max_hw: int = 32, max_c: int = 16) -> Graph:
    """A random float graph over every layer type, shapes at most max_hw x max_hw x max_c."""
    rng = np.random.default_rng(seed)
    hw = int(rng.integers(4, max_hw + 1))
    builder = GraphBuilder(f"random_{seed}", (hw, int(rng.integers(4, max_hw + 1)), int(rng.integers(1, max_c + 1))), seed)
    target = int(rng.integers(min_layers, max_layers + 1))
    activations = list(Activation)
    while len(builder.layers) < target - 2:
        h, w, c = builder.shape
        choice = rng.choice(["conv", "conv", "depthwise", "pool", "pad", "add"])
        stride = 2 if min(h, w) >= 8 and rng.random() < 0.3 else 1
        activation = activations[int(rng.integers(len(activations)))]
        if choice == "conv":
            kernel = int(rng.choice([1, 3]))
            builder.conv(int(rng.integers(1, max_c + 1)), kernel, stride, activation=activation)
        elif choice == "depthwise":
            builder.depthwise(3, stride, activation=activation)
        elif choice == "pool" and min(h, w) >= 2:
            builder.avg_pool(int(rng.choice([2, 3])), stride, same=True)
        elif choice == "pad" and max(h, w) < max_hw - 2:
            builder.pad(tuple(int(p) for p in rng.integers(0, 2, 4)))
        elif choice == "add":
            candidates = [i for i, shape in enumerate(builder.shapes[:-1]) if shape == builder.shape]
            if candidates:
                builder.add(int(rng.choice(candidates)), activation)
    if rng.random() < 0.5:
        builder.mean()
        builder.fc(int(rng.integers(2, 11)))
    else:
        builder.conv(int(rng.integers(1, max_c + 1)), 1)
        builder.softmax()
    return builder.build()


def latency_graph(layers: int = 30, hw: int = 16, channels: int = 16, seed: int = 0) -> Graph:
    """A plain stack of same-shape conv, depthwise and pool layers."""
    builder = GraphBuilder("latency", (hw, hw, channels), seed)
    cycle = ("conv", "depthwise", "conv", "pool")
    for i in range(layers):
        kind = cycle[i % len(cycle)]
        if kind == "conv":
            builder.conv(channels, activation=Activation.RELU)
        elif kind == "depthwise":
            builder.depthwise(activation=Activation.RELU)
        else:
            builder.avg_pool(3)
    return builder.build()


def demo_classifier(classes: int = 3, seed: int = 0) -> Graph:
    """A small classifier whose top-1 class is the dominant color channel of the input."""
    rng = np.random.default_rng(seed)
    h, w = DEMO_PIPELINE.target_h, DEMO_PIPELINE.target_w
    builder = GraphBuilder("demo_classifier", (h, w, 3), seed)
    features = 8

    weights = rng.normal(0.0, 0.01, (features, 3, 3, 3))
    for c in range(3):
        weights[c, :, :, c] += 1.0 / 9.0
    builder.conv(features, activation=Activation.RELU, weights=weights, bias=np.full(features, 1.0))
    builder.depthwise(activation=Activation.RELU, weights=np.full((3, 3, features), 1.0 / 9.0) + rng.normal(0.0, 0.01, (3, 3, features)), bias=np.zeros(features))
    builder.avg_pool(2, stride=2, same=False)
    project = rng.normal(0.0, 0.02, (classes, 1, 1, features))
    for c in range(min(classes, 3)):
        project[c, 0, 0, c] += 1.0
    builder.conv(classes, kernel=1, weights=project, bias=np.zeros(classes))
    builder.mean()
    builder.fc(classes, weights=np.eye(classes) + rng.normal(0.0, 0.02, (classes, classes)), bias=np.zeros(classes))
    builder.softmax()
    return builder.build()


### DEMO ASSETS ###

def write_demo_assets(directory: Union[str, Path], images: int = 20, seed: int = 0) -> Dict[str, str]:
    """Images with labels, a float model, the correct pipeline and one buggy pipeline per bug family."""
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    graph = demo_classifier(seed=seed)
    dataset = [textured_image(*DEMO_IMAGE_SHAPE, rng, dominant=i % 3) for i in range(images)]
    labels = [int(np.argmax(infer(graph, run_pipeline(img, DEMO_PIPELINE)).output.array)) for img in dataset]
    write_dataset(directory / "images", dataset, labels)

    save_graph(graph, directory / "model")
    save_pipeline_spec(directory / "pipeline.json", DEMO_PIPELINE)
    assets = {
        "images": str(directory / "images"),
        "labels": str(directory / "images" / "labels.txt"),
        "model": str(directory / "model"),
        "pipeline": str(directory / "pipeline.json"),
    }
    for family in BugFamily:
        path = directory / f"pipeline_{family.value}.json"
        save_pipeline_spec(path, inject_bug(DEMO_PIPELINE, family))
        assets[f"pipeline_{family.value}"] = str(path)
    logger.info("Wrote demo assets to %s", directory)
    return assets
