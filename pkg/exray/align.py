"""Pairing of edge and reference traces by frame and by layer."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from exray.errors import AlignmentError, StructuralMismatchError
from exray.models import BOUNDARY_LAYERS, PipelineSpec, RecordKind, TraceRecord
from exray.monitor import MODEL_INPUT_KEY, OUTPUT_KEY, RAW_INPUT_KEY, TraceReader, read_trace
from exray.tensor import Tensor, as_float

logger = logging.getLogger(__name__)

BOUNDARY_KEYS = {layer_type.value for layer_type in BOUNDARY_LAYERS}

TraceSource = Union[str, Path, TraceReader]


@dataclass
class FramePair:
    frame_id: str
    edge: List[TraceRecord]
    ref: List[TraceRecord]

    def record(self, side: str, kind, key: Optional[str] = None) -> Optional[TraceRecord]:
        for record in getattr(self, side):
            if record.kind == kind and (key is None or record.key == key):
                return record
        return None


@dataclass
class AlignedTraces:
    edge: TraceReader
    ref: TraceReader
    pairs: List[FramePair]
    unmatched_edge: List[str] = field(default_factory=list)
    unmatched_ref: List[str] = field(default_factory=list)

    @property
    def frame_ids(self) -> List[str]:
        return [pair.frame_id for pair in self.pairs]

    def trace(self, side: str) -> TraceReader:
        return self.edge if side == "edge" else self.ref

    def tensor(self, pair: FramePair, side: str, kind, key: Optional[str] = None) -> Optional[Tensor]:
        record = pair.record(side, kind, key)
        if record is None or record.blob is None:
            return None
        return self.trace(side).load_blob(record)

    def values(self, pair: FramePair, side: str, kind, key: Optional[str] = None) -> Optional[np.ndarray]:
        tensor = self.tensor(pair, side, kind, key)
        return None if tensor is None else as_float(tensor)

    def model_inputs(self, pair: FramePair) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        return (
            self.values(pair, "edge", RecordKind.INPUT, MODEL_INPUT_KEY),
            self.values(pair, "ref", RecordKind.INPUT, MODEL_INPUT_KEY),
        )

    def raw_input(self, pair: FramePair) -> Optional[Tensor]:
        return self.tensor(pair, "edge", RecordKind.INPUT, RAW_INPUT_KEY)

    def pipelines(self) -> Tuple[Optional[PipelineSpec], Optional[PipelineSpec]]:
        """Edge and reference pipeline specs; the edge falls back to the reference."""
        ref = self.ref.manifest.pipeline
        return self.edge.manifest.pipeline or ref, ref


def _load(source: TraceSource) -> TraceReader:
    return source if isinstance(source, TraceReader) else read_trace(source)


def _frames(trace: TraceReader, side: str) -> Dict[str, List[TraceRecord]]:
    frames = trace.by_frame()
    for frame_id, records in frames.items():
        outputs = [r for r in records if r.kind == RecordKind.OUTPUT and r.key == OUTPUT_KEY]
        if len(outputs) > 1:
            raise AlignmentError(f"Duplicate frame_id {frame_id!r} in the {side} trace")
    return frames


def align(edge: TraceSource, ref: TraceSource) -> AlignedTraces:
    edge, ref = _load(edge), _load(ref)
    edge_frames, ref_frames = _frames(edge, "edge"), _frames(ref, "reference")
    pairs = [
        FramePair(frame_id, records, ref_frames[frame_id])
        for frame_id, records in edge_frames.items()
        if frame_id in ref_frames
    ]
    if not pairs:
        raise AlignmentError(f"Traces {edge.directory} and {ref.directory} share no frames")
    aligned = AlignedTraces(
        edge=edge,
        ref=ref,
        pairs=pairs,
        unmatched_edge=[f for f in edge_frames if f not in ref_frames],
        unmatched_ref=[f for f in ref_frames if f not in edge_frames],
    )
    if aligned.unmatched_edge or aligned.unmatched_ref:
        logger.warning(
            "%d edge and %d reference frames have no counterpart",
            len(aligned.unmatched_edge),
            len(aligned.unmatched_ref),
        )
    return aligned


def layer_records(records: List[TraceRecord], kind=RecordKind.LAYER_OUTPUT) -> List[TraceRecord]:
    """Per-layer records of one frame in layer order, Quantize/Dequantize boundaries dropped."""
    selected = [r for r in records if r.kind == kind and r.layer_index is not None and r.key not in BOUNDARY_KEYS]
    return sorted(selected, key=lambda r: r.layer_index)


def pair_layers(pair: FramePair, kind=RecordKind.LAYER_OUTPUT) -> List[Tuple[TraceRecord, TraceRecord]]:
    edge, ref = layer_records(pair.edge, kind), layer_records(pair.ref, kind)
    if len(edge) != len(ref):
        raise StructuralMismatchError(
            f"Frame {pair.frame_id}: edge has {len(edge)} layers, reference has {len(ref)}"
        )
    for e, r in zip(edge, ref):
        if e.key != r.key:
            raise StructuralMismatchError(
                f"Frame {pair.frame_id}: edge layer {e.layer_index} is {e.key}, "
                f"reference layer {r.layer_index} is {r.key}"
            )
    return list(zip(edge, ref))
