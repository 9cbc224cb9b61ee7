"""Graph execution with per-layer timing, capture and fault injection."""

import logging
import time
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Tuple

from exray.errors import InferenceError
from exray.graph import Graph, Layer
from exray.kernels import KernelContext, run_kernel
from exray.models import Capture, FaultMode, FaultSpec, LayerType, ResolverKind
from exray.tensor import Tensor

logger = logging.getLogger(__name__)

FAULT_SYNTAX = {
    ("accumulator", "wrap"): FaultMode.WRAP_ACCUMULATOR,
    ("accumulator", "narrow"): FaultMode.NARROW_ACCUMULATOR,
    ("requant", "truncate"): FaultMode.TRUNCATE_REQUANT,
    ("kernel", "slow"): FaultMode.SLOW_KERNEL,
}
DEFAULT_SLOW_FACTOR = 10


@dataclass(frozen=True)
class KernelResolver:
    kind: ResolverKind = ResolverKind.REFERENCE
    faults: Tuple[FaultSpec, ...] = ()

    def faults_for(self, layer: Layer) -> Tuple[FrozenSet[FaultMode], int]:
        modes, factor = set(), 1
        for fault in self.faults:
            if not fault.matches(layer.index, layer.type):
                continue
            if fault.mode == FaultMode.SLOW_KERNEL:
                factor = max(factor, fault.factor)
            else:
                modes.add(fault.mode)
        return frozenset(modes), factor


def parse_fault(text: str) -> FaultSpec:
    """Parse `type=MODE@target`, e.g. `requant=truncate@AveragePool2D` or `kernel=slow:100@4`."""
    try:
        head, target = text.rsplit("@", 1)
        kind, mode = head.split("=", 1)
    except ValueError:
        raise ValueError(f"Fault spec {text!r} must look like type=MODE@layer")
    mode, _, factor = mode.partition(":")
    key = (kind.strip().lower(), mode.strip().lower())
    if key not in FAULT_SYNTAX:
        choices = ", ".join(f"{k}={m}" for k, m in FAULT_SYNTAX)
        raise ValueError(f"Unknown fault {kind}={mode}; expected one of {choices}")
    fault_mode = FAULT_SYNTAX[key]
    if factor and fault_mode != FaultMode.SLOW_KERNEL:
        raise ValueError(f"Only kernel=slow takes a factor, got {text!r}")

    target = target.strip()
    if target.isdigit():
        parsed_target = int(target)
    else:
        try:
            parsed_target = LayerType(target)
        except ValueError:
            raise ValueError(f"Unknown layer type {target!r} in fault spec")
    if fault_mode == FaultMode.SLOW_KERNEL:
        slow = int(factor) if factor else DEFAULT_SLOW_FACTOR
        return FaultSpec(target=parsed_target, mode=fault_mode, factor=slow)
    return FaultSpec(target=parsed_target, mode=fault_mode)


@dataclass
class InferenceResult:
    output: Tensor
    layer_spans: List[Tuple[int, int]]
    t_start_ns: int
    t_end_ns: int
    memory_bytes: int
    layer_outputs: Optional[List[Tensor]] = None
    layer_types: List[LayerType] = field(default_factory=list)

    @property
    def latency_ns(self) -> int:
        return self.t_end_ns - self.t_start_ns

    @property
    def layer_latencies_ns(self) -> List[int]:
        return [end - start for start, end in self.layer_spans]


def infer(
    graph: Graph,
    x: Tensor,
    resolver: KernelResolver = KernelResolver(),
    capture: Capture = Capture.OUTPUT_ONLY,
) -> InferenceResult:
    if x.dtype != graph.input_dtype:
        raise InferenceError(
            f"Graph {graph.name} expects {graph.input_dtype.value} input, got {x.dtype.value}"
        )
    if x.shape != graph.input_shape:
        raise InferenceError(f"Graph {graph.name} expects input shape {graph.input_shape}, got {x.shape}")

    outputs: List[Tensor] = []
    spans: List[Tuple[int, int]] = []
    current = x
    t_start = time.perf_counter_ns()
    for layer in graph.layers:
        modes, factor = resolver.faults_for(layer)
        ctx = KernelContext(resolver.kind, modes, outputs)
        t0 = time.perf_counter_ns()
        for _ in range(factor):
            result = run_kernel(layer, current, ctx)
        t1 = time.perf_counter_ns()
        spans.append((t0, t1))
        if result.shape != graph.shapes[layer.index]:
            raise InferenceError(
                f"Layer {layer.index} produced {result.shape}, shape inference expected {graph.shapes[layer.index]}"
            )
        outputs.append(result)
        current = result
    t_end = time.perf_counter_ns()

    return InferenceResult(
        output=outputs[graph.output_index],
        layer_spans=spans,
        t_start_ns=t_start,
        t_end_ns=t_end,
        memory_bytes=graph.analytic_memory_bytes,
        layer_outputs=outputs if Capture(capture) == Capture.PER_LAYER else None,
        layer_types=[layer.type for layer in graph.layers],
    )
