"""Validation engine: accuracy match, per-layer divergence, latency diffing and assertions."""

import logging
import math
from collections import OrderedDict, defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from exray.align import BOUNDARY_KEYS, AlignedTraces, TraceSource, align, pair_layers
from exray.assertions import run_assertions
from exray.config import get_settings
from exray.errors import AlignmentError, ExrayError, StructuralMismatchError
from exray.models import (
    AccuracySummary,
    Capture,
    LatencyReport,
    LatencyRow,
    LayerDivergence,
    LayerStage,
    RecordKind,
    Straggler,
    ValidationReport,
    VerdictStatus,
)
from exray.monitor import INFERENCE_KEY, LABEL_KEY, LAYER_LATENCY_KEY, MODEL_INPUT_KEY, OUTPUT_KEY, layer_spans
from exray.tensor import as_float

logger = logging.getLogger(__name__)

PRIOR_FLOOR = 1e-6
EXACT_FLOOR = 1e-4
NS_PER_MS = 1e6

EXIT_CLEAN, EXIT_FINDINGS, EXIT_ERROR = 0, 1, 2


### ACCURACY ###

def _top1(values: np.ndarray) -> int:
    return int(np.argmax(values.ravel()))


def accuracy_check(aligned: AlignedTraces, labels: Optional[Dict[str, int]] = None) -> AccuracySummary:
    """Top-1 agreement between the two sides, and top-1 accuracy of each when labels are known."""
    agree = labelled = edge_correct = ref_correct = 0
    for pair in aligned.pairs:
        edge = aligned.values(pair, "edge", RecordKind.OUTPUT, OUTPUT_KEY)
        ref = aligned.values(pair, "ref", RecordKind.OUTPUT, OUTPUT_KEY)
        if edge is None or ref is None:
            side = "edge" if edge is None else "reference"
            raise AlignmentError(f"Frame {pair.frame_id} has no Output record in the {side} trace")
        edge_top, ref_top = _top1(edge), _top1(ref)
        agree += edge_top == ref_top

        label = labels.get(pair.frame_id) if labels is not None else None
        if label is None:
            record = pair.record("edge", RecordKind.CUSTOM, LABEL_KEY) or pair.record("ref", RecordKind.CUSTOM, LABEL_KEY)
            label = int(record.scalar) if record is not None else None
        if label is not None:
            labelled += 1
            edge_correct += edge_top == label
            ref_correct += ref_top == label

    frames = len(aligned.pairs)
    return AccuracySummary(
        frames=frames,
        agreement=agree / frames,
        labelled_frames=labelled,
        edge_accuracy=edge_correct / labelled if labelled else None,
        reference_accuracy=ref_correct / labelled if labelled else None,
    )


### PER-LAYER DIVERGENCE ###

class _ErrorAccumulator:
    """Pooled squared error against the reference, with the reference range, overall and per channel."""

    def __init__(self, layer_index: int, layer_type: str, reference_index: Optional[int] = None):
        self.layer_index, self.layer_type, self.reference_index = layer_index, layer_type, reference_index
        self.sse = 0.0
        self.count = 0
        self.lo, self.hi = math.inf, -math.inf
        self.channel_sse = self.channel_count = self.channel_lo = self.channel_hi = None

    def add(self, edge: np.ndarray, ref: np.ndarray, frame_id: str) -> None:
        if edge.shape != ref.shape:
            raise StructuralMismatchError(
                f"Frame {frame_id}: layer {self.layer_index} shape {edge.shape} vs reference {ref.shape}"
            )
        error = (edge - ref) ** 2
        self.sse += float(error.sum())
        self.count += error.size
        self.lo, self.hi = min(self.lo, float(ref.min())), max(self.hi, float(ref.max()))

        channels = ref.shape[-1] if ref.ndim else 1
        error_c, ref_c = error.reshape(-1, channels), ref.reshape(-1, channels)
        if self.channel_sse is None:
            self.channel_sse = np.zeros(channels)
            self.channel_count = 0
            self.channel_lo, self.channel_hi = np.full(channels, math.inf), np.full(channels, -math.inf)
        self.channel_sse += error_c.sum(axis=0)
        self.channel_count += error_c.shape[0]
        self.channel_lo = np.minimum(self.channel_lo, ref_c.min(axis=0))
        self.channel_hi = np.maximum(self.channel_hi, ref_c.max(axis=0))

    def divergence(self) -> LayerDivergence:
        rmse = math.sqrt(self.sse / self.count) if self.count else 0.0
        scale = self.hi - self.lo if self.count else 0.0
        degenerate = not scale > 0
        worst_channel = worst = None
        if self.channel_sse is not None and self.channel_sse.size > 1:
            channel_scale = self.channel_hi - self.channel_lo
            usable = channel_scale > 0
            if usable.any():
                channel_rmse = np.sqrt(self.channel_sse / self.channel_count)
                hats = np.where(usable, channel_rmse / np.where(usable, channel_scale, 1.0), -1.0)
                worst_channel = int(np.argmax(hats))
                worst = float(hats[worst_channel])
        return LayerDivergence(
            layer_index=self.layer_index,
            layer_type=self.layer_type,
            reference_index=self.reference_index,
            rmse=rmse,
            scale=scale,
            rmse_hat=None if degenerate else rmse / scale,
            degenerate=degenerate,
            worst_channel=worst_channel,
            worst_channel_rmse_hat=worst,
        )


def input_divergence(aligned: AlignedTraces) -> Optional[LayerDivergence]:
    """Divergence of the preprocessed model input, or None when either side did not log it."""
    accumulator = _ErrorAccumulator(-1, MODEL_INPUT_KEY)
    for pair in aligned.pairs:
        edge, ref = aligned.model_inputs(pair)
        if edge is None or ref is None:
            return None
        try:
            accumulator.add(edge, ref, pair.frame_id)
        except StructuralMismatchError:
            logger.warning("Model input shapes differ on frame %s", pair.frame_id)
            return None
    return accumulator.divergence()


def per_layer_rmse(aligned: AlignedTraces) -> List[LayerDivergence]:
    """rmse and range-normalized rmse per aligned layer, pooled over all elements of all frames.

    Layers are aligned by position after dropping Quantize/Dequantize; the scale is the
    reference output range. Edge int8 outputs are dequantized first.
    """
    accumulators: List[_ErrorAccumulator] = []
    for pair in aligned.pairs:
        layers = pair_layers(pair)
        if not layers:
            raise StructuralMismatchError(f"Frame {pair.frame_id} carries no per-layer outputs")
        if accumulators and len(layers) != len(accumulators):
            raise StructuralMismatchError(
                f"Frame {pair.frame_id} has {len(layers)} layers, earlier frames have {len(accumulators)}"
            )
        if not accumulators:
            accumulators = [_ErrorAccumulator(e.layer_index, e.key, r.layer_index) for e, r in layers]
        for accumulator, (edge_record, ref_record) in zip(accumulators, layers):
            edge = aligned.edge.load_blob(edge_record)
            ref = aligned.ref.load_blob(ref_record)
            accumulator.add(as_float(edge), as_float(ref), pair.frame_id)
    return [accumulator.divergence() for accumulator in accumulators]


def localize_divergence(
    divergences: Sequence[LayerDivergence],
    jump_delta: float = 0.05,
    jump_ratio: float = 3.0,
    model_input: Optional[LayerDivergence] = None,
    jump_floor: float = 0.01,
) -> Optional[Union[int, str]]:
    """First layer whose rmse_hat jumps over everything before it.

    A jump is an absolute rise of at least `jump_delta` over the prior maximum, a rise
    to `jump_ratio` times a prior maximum of at least 1e-6, or, while every earlier layer
    still agrees (prior maximum below 1e-6), any value of at least `jump_floor`.

    Both sides preprocess the same raw bytes, so a model input that departs at all
    (rmse_hat of at least 1e-4, or `jump_delta` if smaller) is reported as "preprocessing".
    Degenerate layers neither fire nor raise the prior.
    """
    if model_input is not None and model_input.rmse_hat is not None:
        if model_input.rmse_hat >= min(jump_delta, EXACT_FLOOR):
            return "preprocessing"
    prior = 0.0
    for divergence in divergences:
        if divergence.degenerate or divergence.rmse_hat is None:
            continue
        value = divergence.rmse_hat
        if value - prior >= jump_delta:
            return divergence.layer_index
        if prior >= PRIOR_FLOOR and value >= jump_ratio * prior:
            return divergence.layer_index
        if prior < PRIOR_FLOOR and value >= jump_floor:
            return divergence.layer_index
        prior = max(prior, value)
    return None


def comparison_floor(aligned: AlignedTraces, jump_floor: float) -> float:
    """Departure floor for a pair of traces: EXACT_FLOOR when both ran the same model.

    Kernels agree bit for bit on one model, so the only noise left is float summation
    order. Across models (int8 edge, float reference) rounding noise needs `jump_floor`.
    """
    edge_hash, ref_hash = aligned.edge.manifest.model_hash, aligned.ref.manifest.model_hash
    if edge_hash is not None and edge_hash == ref_hash:
        return EXACT_FLOOR
    return jump_floor


def channel_findings(divergences: Sequence[LayerDivergence], threshold: float) -> List[dict]:
    return [
        dict(
            layer_index=d.layer_index,
            layer_type=d.layer_type,
            channel=d.worst_channel,
            rmse_hat=d.worst_channel_rmse_hat,
        )
        for d in divergences
        if d.worst_channel_rmse_hat is not None and d.worst_channel_rmse_hat >= threshold
    ]


def compare_series(
    ref: TraceSource, candidates: Sequence[TraceSource]
) -> "OrderedDict[str, Tuple[Optional[LayerDivergence], List[LayerDivergence]]]":
    """rmse_hat series of several candidate traces against one baseline trace."""
    series = OrderedDict()
    for candidate in candidates:
        aligned = align(candidate, ref)
        name = str(aligned.edge.directory)
        series[name] = (input_divergence(aligned), per_layer_rmse(aligned))
    return series


### LATENCY ###

def _layer_latencies(aligned: AlignedTraces, side: str):
    """Mean per-frame latency (ms) per layer index, the layer types, and the mean inference span."""
    totals: Dict[int, float] = defaultdict(float)
    types: Dict[int, str] = {}
    inference = 0.0
    for pair in aligned.pairs:
        for record in getattr(pair, side):
            if record.kind != RecordKind.LATENCY:
                continue
            if record.key == LAYER_LATENCY_KEY:
                for span in layer_spans(record):
                    totals[span.layer_index] += span.duration_ns / NS_PER_MS
                    types[span.layer_index] = span.layer_type
            elif record.key == INFERENCE_KEY:
                inference += (record.t_end_ns - record.t_start_ns) / NS_PER_MS
    frames = len(aligned.pairs)
    means = OrderedDict((index, totals[index] / frames) for index in sorted(totals))
    return means, types, inference / frames


def latency_report(aligned: AlignedTraces, factor: float = 5.0, min_share: float = 0.05) -> LatencyReport:
    """Latency by layer type for both sides, and stragglers by latency share."""
    edge, edge_types, edge_inference = _layer_latencies(aligned, "edge")
    ref, ref_types, ref_inference = _layer_latencies(aligned, "ref")

    rows: Dict[str, LatencyRow] = OrderedDict()
    for latencies, types, side in ((edge, edge_types, "edge"), (ref, ref_types, "reference")):
        for index, ms in latencies.items():
            row = rows.setdefault(types[index], LatencyRow(layer_type=types[index]))
            setattr(row, f"{side}_count", getattr(row, f"{side}_count") + 1)
            setattr(row, f"{side}_ms", getattr(row, f"{side}_ms") + ms)

    edge_total, ref_total = sum(edge.values()), sum(ref.values())
    report = LatencyReport(
        rows=list(rows.values()),
        edge_total_ms=edge_total,
        reference_total_ms=ref_total,
        edge_inference_ms=edge_inference,
        reference_inference_ms=ref_inference,
    )
    if not edge_total or not ref_total:
        return report

    edge_layers = [i for i in edge if edge_types[i] not in BOUNDARY_KEYS]
    ref_layers = [i for i in ref if ref_types[i] not in BOUNDARY_KEYS]
    if len(edge_layers) != len(ref_layers):
        logger.warning("Latency layers do not line up (%d vs %d); no straggler check", len(edge_layers), len(ref_layers))
        return report
    for e, r in zip(edge_layers, ref_layers):
        edge_share, ref_share = edge[e] / edge_total, ref[r] / ref_total
        ratio = edge_share / ref_share if ref_share > 0 else math.inf
        if edge_share >= min_share and ratio >= factor:
            report.stragglers.append(
                Straggler(
                    layer_index=e,
                    layer_type=edge_types[e],
                    edge_share=edge_share,
                    reference_share=ref_share,
                    factor=min(ratio, 1e12),
                )
            )
    return report


### REPORT ###

def _has_layer_capture(aligned: AlignedTraces) -> bool:
    return all(trace.manifest.capture == Capture.PER_LAYER for trace in (aligned.edge, aligned.ref))


def run_validation(
    edge: TraceSource,
    ref: TraceSource,
    labels: Optional[Dict[str, int]] = None,
    assertions: Sequence[Union[str, Path]] = (),
    jump_delta: Optional[float] = None,
    jump_ratio: Optional[float] = None,
    jump_floor: Optional[float] = None,
    agreement_threshold: Optional[float] = None,
    force_layers: bool = False,
) -> ValidationReport:
    """Accuracy match, then per-layer scrutiny when agreement drops, then the assertion suite."""
    settings = get_settings()
    jump_delta = settings.jump_delta if jump_delta is None else jump_delta
    jump_ratio = settings.jump_ratio if jump_ratio is None else jump_ratio
    agreement_threshold = settings.agreement_threshold if agreement_threshold is None else agreement_threshold

    aligned = align(edge, ref)
    report = ValidationReport()
    findings, errors, completed = [], [], []

    # stage 1
    report.accuracy = accuracy_check(aligned, labels)
    completed.append("accuracy")
    logger.info("Top-1 agreement %.4f over %d frames", report.accuracy.agreement, report.accuracy.frames)

    # stage 2
    stage = LayerStage()
    if report.accuracy.agreement < agreement_threshold or force_layers:
        stage.reason = "forced" if force_layers else f"agreement below {agreement_threshold}"
        try:
            # model inputs are logged under every capture mode
            stage.input = input_divergence(aligned)
            if not _has_layer_capture(aligned):
                stage.reason = "per-layer capture missing on one side"
            else:
                try:
                    stage.series = per_layer_rmse(aligned)
                except StructuralMismatchError as exc:
                    stage.reason = f"structural mismatch: {exc.detail}"
                    findings.append(stage.reason)
            floor = comparison_floor(aligned, settings.jump_floor if jump_floor is None else jump_floor)
            stage.divergence = localize_divergence(stage.series, jump_delta, jump_ratio, stage.input, floor)
            stage.channel_findings = channel_findings(stage.series, settings.channel_threshold)
            stage.ran = stage.input is not None or bool(stage.series)
            if stage.ran:
                completed.append("layers")
        except ExrayError as exc:
            errors.append(f"layers: {exc.detail}")
        if stage.divergence is not None:
            findings.append(f"divergence at {_describe(stage)}")
    report.layers = stage

    # stage 3
    try:
        report.assertions = run_assertions(aligned, assertions)
        completed.append("assertions")
    except ExrayError as exc:
        errors.append(f"assertions: {exc.detail}")
    findings.extend(f"assertion {v.name} failed: {v.cause}" for v in report.assertions if v.verdict == VerdictStatus.FAIL)

    try:
        report.latency = latency_report(aligned, settings.straggler_factor, settings.straggler_min_share)
        completed.append("latency")
    except ExrayError as exc:
        errors.append(f"latency: {exc.detail}")

    report.summary = {
        "frames": len(aligned.pairs),
        "unmatched_edge": aligned.unmatched_edge,
        "unmatched_reference": aligned.unmatched_ref,
        "agreement": report.accuracy.agreement,
        "divergence": stage.divergence,
        "divergence_layer": _describe(stage) if stage.divergence is not None else None,
        "failed_assertions": [v.name for v in report.assertions if v.verdict == VerdictStatus.FAIL],
        "stragglers": [s.layer_index for s in report.latency.stragglers],
        "findings": findings,
        "completed_stages": completed,
        "errors": errors,
        "partial": bool(errors),
    }
    return report


def _describe(stage: LayerStage) -> str:
    if isinstance(stage.divergence, str):
        return stage.divergence
    for divergence in stage.series:
        if divergence.layer_index == stage.divergence:
            return f"layer {divergence.layer_index} ({divergence.layer_type})"
    return f"layer {stage.divergence}"


def exit_status(report: ValidationReport) -> int:
    if report.summary.get("errors"):
        return EXIT_ERROR
    if report.summary.get("findings"):
        return EXIT_FINDINGS
    return EXIT_CLEAN


def write_report(report: ValidationReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.json(indent=2), encoding="utf-8")
    return path
