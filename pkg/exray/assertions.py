"""Root-cause assertions over aligned edge and reference traces.

Each built-in checks one frame at a time and the frame verdicts are folded into one:
any failing frame fails the assertion, it is inapplicable only when every frame is.
External assertions are executables that receive both trace directories and answer
with a verdict as JSON.
"""

import itertools
import json
import logging
import os
import subprocess
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from exray.align import AlignedTraces, FramePair, pair_layers
from exray.errors import AssertionPluginError, ExrayError, StructuralMismatchError
from exray.imgproc import run_pipeline, tensor_to_image
from exray.models import ROTATIONS, PipelineSpec, RecordKind, Resizer, Verdict, VerdictStatus
from exray.monitor import MODEL_INPUT_KEY, RAW_INPUT_KEY
from exray.tensor import Tensor, as_float

logger = logging.getLogger(__name__)

PERMUTATION_TOLERANCE = 1e-6
NORMALIZATION_RESIDUAL = 1e-4
NORMALIZATION_TOLERANCE = 1e-3
GRAY_LEVEL_TOLERANCE = 1.0
CLIPPING_LIMIT = 0.01
MIN_STEPS = 8
PLUGIN_TIMEOUT_S = 300

PASS, FAIL, INAPPLICABLE = VerdictStatus.PASS, VerdictStatus.FAIL, VerdictStatus.INAPPLICABLE


def _verdict(name: str, status: VerdictStatus, inputs: Sequence[str], cause: Optional[str] = None, **evidence) -> Verdict:
    return Verdict(name=name, verdict=status, cause=cause, inputs=list(inputs), evidence=evidence)


def fold_verdicts(name: str, inputs: Sequence[str], frames: Dict[str, Verdict]) -> Verdict:
    failed = {frame_id: v for frame_id, v in frames.items() if v.verdict == FAIL}
    if failed:
        frame_id, first = next(iter(failed.items()))
        return _verdict(
            name, FAIL, inputs, first.cause,
            failed_frames=len(failed), frames=len(frames), first_frame=frame_id, **first.evidence,
        )
    if frames and all(v.verdict == INAPPLICABLE for v in frames.values()):
        reasons = sorted({v.cause for v in frames.values() if v.cause})
        return _verdict(name, INAPPLICABLE, inputs, reasons[0] if reasons else None, frames=len(frames))
    if not frames:
        return _verdict(name, INAPPLICABLE, inputs, "no frames", frames=0)
    return _verdict(name, PASS, inputs, frames=len(frames))


### PREPROCESSING ###

def channel_name(permutation: Sequence[int], order: str = "RGB") -> str:
    return "".join(order[p] for p in permutation) + "->" + order


def check_channel_order(edge: np.ndarray, ref: np.ndarray, order: str = "RGB") -> Verdict:
    name, inputs = "channel_order", [MODEL_INPUT_KEY]
    if edge.shape != ref.shape or edge.ndim != 3 or edge.shape[2] != 3:
        return _verdict(name, INAPPLICABLE, inputs, "shape mismatch", edge_shape=list(edge.shape), ref_shape=list(ref.shape))
    if np.max(np.abs(edge - ref)) <= PERMUTATION_TOLERANCE:
        return _verdict(name, PASS, inputs)
    for permutation in itertools.permutations(range(3)):
        if permutation == (0, 1, 2):
            continue
        if np.max(np.abs(edge - ref[..., list(permutation)])) <= PERMUTATION_TOLERANCE:
            return _verdict(name, FAIL, inputs, channel_name(permutation, order), permutation=list(permutation))
    return _verdict(name, INAPPLICABLE, inputs, "no channel permutation matches", max_abs_diff=float(np.max(np.abs(edge - ref))))


def check_normalization(edge: np.ndarray, ref: np.ndarray) -> Verdict:
    name, inputs = "normalization", [MODEL_INPUT_KEY]
    if edge.shape != ref.shape:
        return _verdict(name, INAPPLICABLE, inputs, "shape mismatch")
    x, y = edge.ravel(), ref.ravel()
    scale = float(y.max() - y.min())
    if x.max() == x.min() or scale == 0.0:
        return _verdict(name, INAPPLICABLE, inputs, "constant tensor")
    design = np.stack([x, np.ones_like(x)], axis=1)
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.sqrt(np.mean((design @ np.array([a, b]) - y) ** 2)))
    evidence = dict(a=float(a), b=float(b), residual_rms=residual)
    if residual >= NORMALIZATION_RESIDUAL * scale:
        return _verdict(name, INAPPLICABLE, inputs, "not an affine map", **evidence)
    if abs(a - 1.0) <= NORMALIZATION_TOLERANCE and abs(b) <= NORMALIZATION_TOLERANCE:
        return _verdict(name, PASS, inputs, **evidence)
    lo, hi = float(y.min()), float(y.max())
    evidence.update(
        edge_range=[float(x.min()), float(x.max())],
        reference_range=[lo, hi],
        implied_edge_range=[(lo - b) / a, (hi - b) / a],
    )
    return _verdict(name, FAIL, inputs, f"a={a:.4g}, b={b:.4g}", **evidence)


def _gray_level_rms(candidate: np.ndarray, edge: np.ndarray, spec: PipelineSpec) -> float:
    levels = (candidate - edge) / (spec.norm_hi - spec.norm_lo) * 255.0
    return float(np.sqrt(np.mean(levels ** 2)))


def _recompute_matches(raw: Tensor, edge: np.ndarray, spec: PipelineSpec, field: str, choices) -> Tuple[list, dict]:
    image = tensor_to_image(raw)
    matches, distances = [], {}
    for choice in choices:
        candidate = run_pipeline(image, spec.copy(update={field: choice})).array.astype(np.float64)
        if candidate.shape != edge.shape:
            continue
        distance = _gray_level_rms(candidate, edge, spec)
        distances[str(getattr(choice, "value", choice))] = distance
        if distance <= GRAY_LEVEL_TOLERANCE:
            matches.append(choice)
    return matches, distances


def check_resize(raw: Tensor, edge: np.ndarray, edge_spec: PipelineSpec, ref_spec: PipelineSpec) -> Verdict:
    name, inputs = "resize", [RAW_INPUT_KEY, MODEL_INPUT_KEY]
    matches, distances = _recompute_matches(raw, edge, edge_spec, "resizer", list(Resizer))
    if not matches:
        return _verdict(name, INAPPLICABLE, inputs, "no resizer reproduces the edge input", rms_gray_levels=distances)
    evidence = dict(matches=[m.value for m in matches], reference=ref_spec.resizer.value, rms_gray_levels=distances)
    if ref_spec.resizer in matches:
        return _verdict(name, PASS, inputs, **evidence)
    return _verdict(name, FAIL, inputs, matches[0].value, **evidence)


def check_rotation(raw: Tensor, edge: np.ndarray, edge_spec: PipelineSpec, ref_spec: PipelineSpec) -> Verdict:
    name, inputs = "rotation", [RAW_INPUT_KEY, MODEL_INPUT_KEY]
    matches, distances = _recompute_matches(raw, edge, edge_spec, "rotation", ROTATIONS)
    if not matches:
        return _verdict(name, INAPPLICABLE, inputs, "no rotation reproduces the edge input", rms_gray_levels=distances)
    evidence = dict(matches=matches, reference=ref_spec.rotation, rms_gray_levels=distances)
    if ref_spec.rotation in matches:
        return _verdict(name, PASS, inputs, **evidence)
    return _verdict(name, FAIL, inputs, str(matches[0]), **evidence)


def _per_frame(aligned: AlignedTraces, check: Callable[[FramePair], Verdict]) -> Dict[str, Verdict]:
    return {pair.frame_id: check(pair) for pair in aligned.pairs}


def assert_channel_order(aligned: AlignedTraces) -> Verdict:
    _, ref_spec = aligned.pipelines()
    order = ref_spec.channel_order.value if ref_spec is not None else "RGB"

    def check(pair: FramePair) -> Verdict:
        edge, ref = aligned.model_inputs(pair)
        if edge is None or ref is None:
            return _verdict("channel_order", INAPPLICABLE, [MODEL_INPUT_KEY], "model input not logged")
        return check_channel_order(edge, ref, order)

    return fold_verdicts("channel_order", [MODEL_INPUT_KEY], _per_frame(aligned, check))


def assert_normalization(aligned: AlignedTraces) -> Verdict:
    def check(pair: FramePair) -> Verdict:
        edge, ref = aligned.model_inputs(pair)
        if edge is None or ref is None:
            return _verdict("normalization", INAPPLICABLE, [MODEL_INPUT_KEY], "model input not logged")
        return check_normalization(edge, ref)

    return fold_verdicts("normalization", [MODEL_INPUT_KEY], _per_frame(aligned, check))


def _raw_check(aligned: AlignedTraces, name: str, check_frame) -> Verdict:
    inputs = [RAW_INPUT_KEY, MODEL_INPUT_KEY]
    edge_spec, ref_spec = aligned.pipelines()
    if ref_spec is None:
        return _verdict(name, INAPPLICABLE, inputs, "reference pipeline unknown")

    def check(pair: FramePair) -> Verdict:
        raw = aligned.raw_input(pair)
        edge = aligned.values(pair, "edge", RecordKind.INPUT, MODEL_INPUT_KEY)
        if raw is None or edge is None:
            return _verdict(name, INAPPLICABLE, inputs, "raw or model input not logged")
        return check_frame(raw, edge, edge_spec, ref_spec)

    return fold_verdicts(name, inputs, _per_frame(aligned, check))


def assert_resize(aligned: AlignedTraces) -> Verdict:
    return _raw_check(aligned, "resize", check_resize)


def assert_rotation(aligned: AlignedTraces) -> Verdict:
    return _raw_check(aligned, "rotation", check_rotation)


### QUANTIZATION ###

class _LayerResolution:
    """Pooled clipping and spread statistics of the reference activations of one layer."""

    def __init__(self, layer_index: int, layer_type: str):
        self.layer_index, self.layer_type = layer_index, layer_type
        self.clipped = self.total = 0
        self.lo = self.hi = None
        self.channel_lo = self.channel_hi = None
        self.step = self.channel_step = None

    def observe(self, ref: np.ndarray, quantized: Tensor) -> None:
        qp = quantized.quant
        scale = np.asarray(qp.scale, dtype=np.float64)
        calib_lo, calib_hi = np.asarray(qp.calib_min), np.asarray(qp.calib_max)
        values = ref.reshape(-1, ref.shape[-1]) if qp.per_channel else ref.reshape(-1, 1)
        outside = (values < calib_lo - scale / 2) | (values > calib_hi + scale / 2)
        self.clipped += int(outside.sum())
        self.total += outside.size

        channels = ref.reshape(-1, ref.shape[-1])
        c_lo, c_hi = channels.min(axis=0), channels.max(axis=0)
        if self.lo is None:
            self.lo, self.hi, self.channel_lo, self.channel_hi = float(ref.min()), float(ref.max()), c_lo, c_hi
        else:
            self.lo, self.hi = min(self.lo, float(ref.min())), max(self.hi, float(ref.max()))
            self.channel_lo, self.channel_hi = np.minimum(self.channel_lo, c_lo), np.maximum(self.channel_hi, c_hi)
        self.step = float(scale.max()) if qp.per_channel else float(scale[0])
        self.channel_step = scale if qp.per_channel else np.full(c_lo.shape, scale[0])

    def findings(self) -> dict:
        clipped = self.clipped / self.total if self.total else 0.0
        spread = self.hi - self.lo
        steps = spread / self.step
        channel_steps = (self.channel_hi - self.channel_lo) / self.channel_step
        squashed = np.flatnonzero((self.channel_hi > self.channel_lo) & (channel_steps < 1.0))
        causes = []
        if clipped > CLIPPING_LIMIT:
            causes.append("clipping")
        if spread > 0 and steps < MIN_STEPS:
            causes.append("resolution")
        if squashed.size:
            causes.append("channel squash")
        return dict(
            layer_index=self.layer_index,
            layer_type=self.layer_type,
            clipped_fraction=clipped,
            steps=steps,
            squashed_channels=squashed.tolist(),
            causes=causes,
        )


def assert_quant_resolution(aligned: AlignedTraces) -> Verdict:
    name, inputs = "quant_resolution", ["LayerOutput"]
    if not aligned.edge.manifest.int8 or aligned.ref.manifest.int8:
        return _verdict(name, INAPPLICABLE, inputs, "needs an int8 edge trace and a float reference")
    layers: Dict[int, _LayerResolution] = {}
    try:
        for pair in aligned.pairs:
            for position, (edge_record, ref_record) in enumerate(pair_layers(pair)):
                quantized = aligned.edge.load_blob(edge_record)
                if quantized.quant is None:
                    continue
                stats = layers.setdefault(position, _LayerResolution(edge_record.layer_index, edge_record.key))
                stats.observe(as_float(aligned.ref.load_blob(ref_record)), quantized)
    except StructuralMismatchError as exc:
        return _verdict(name, INAPPLICABLE, inputs, exc.detail)
    if not layers:
        return _verdict(name, INAPPLICABLE, inputs, "no quantized layer outputs logged")

    per_layer = [layers[position].findings() for position in sorted(layers)]
    failing = [finding for finding in per_layer if finding["causes"]]
    if not failing:
        return _verdict(name, PASS, inputs, layers=per_layer)
    first = failing[0]
    cause = f"{', '.join(first['causes'])} at layer {first['layer_index']} ({first['layer_type']})"
    return _verdict(name, FAIL, inputs, cause, layers=per_layer, failing_layers=[f["layer_index"] for f in failing])


BUILTIN_ASSERTIONS: Dict[str, Callable[[AlignedTraces], Verdict]] = {
    "channel_order": assert_channel_order,
    "normalization": assert_normalization,
    "resize": assert_resize,
    "rotation": assert_rotation,
    "quant_resolution": assert_quant_resolution,
}
PREPROCESSING_ASSERTIONS = ("channel_order", "normalization", "resize", "rotation")


### EXTERNAL ###

def load_assertion_file(path: Union[str, Path]) -> List[Path]:
    """One executable path per line; blank lines and `#` comments are skipped."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise AssertionPluginError(f"Cannot read assertion list {path}: {exc}")
    executables = []
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        executable = Path(line) if Path(line).is_absolute() else path.parent / line
        if not executable.is_file() or not os.access(executable, os.X_OK):
            raise AssertionPluginError(f"{path} line {number}: {line} is not an executable file")
        executables.append(executable)
    return executables


def run_external(executable: Union[str, Path], aligned: AlignedTraces) -> Verdict:
    executable = Path(executable)
    request = {
        "edge": str(aligned.edge.directory),
        "ref": str(aligned.ref.directory),
        "frames": aligned.frame_ids,
    }
    try:
        completed = subprocess.run(
            [str(executable), request["edge"], request["ref"]],
            input=json.dumps(request),
            capture_output=True,
            text=True,
            timeout=PLUGIN_TIMEOUT_S,
        )
        if completed.returncode != 0:
            raise AssertionPluginError(
                f"exited with status {completed.returncode}: {completed.stderr.strip()[-500:]}"
            )
        payload = json.loads(completed.stdout)
        payload.setdefault("name", executable.name)
        return Verdict(**payload)
    except (OSError, subprocess.TimeoutExpired, ValueError, TypeError, ValidationError, AssertionPluginError) as exc:
        detail = exc.detail if isinstance(exc, ExrayError) else str(exc)
        logger.warning("External assertion %s failed: %s", executable, detail)
        return _verdict(executable.name, INAPPLICABLE, [], "assertion plugin failed", error=detail)


def run_assertions(aligned: AlignedTraces, external: Sequence[Union[str, Path]] = ()) -> List[Verdict]:
    verdicts = []
    for name, assertion in BUILTIN_ASSERTIONS.items():
        logger.info("Running assertion %s", name)
        verdicts.append(assertion(aligned))
    for executable in external:
        logger.info("Running external assertion %s", executable)
        verdicts.append(run_external(executable, aligned))
    return verdicts
