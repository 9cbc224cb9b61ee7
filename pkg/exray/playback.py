"""Dataset playback for edge runs and faithful reference replay of logged inputs."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

from tqdm import tqdm

from exray.config import get_settings
from exray.errors import ExrayError, ImageFormatError, ReplayError
from exray.graph import Graph
from exray.imgproc import Image, image_to_tensor, pipeline_hash, read_ppm, run_pipeline, tensor_to_image
from exray.models import Capture, PipelineSpec, RecordKind, ResolverKind
from exray.monitor import LABEL_KEY, MODEL_INPUT_KEY, RAW_INPUT_KEY, MonitorSession, read_trace, session_begin
from exray.runtime import InferenceResult, KernelResolver, infer
from exray.tensor import Tensor

logger = logging.getLogger(__name__)

IMAGE_SUFFIX = ".ppm"


@dataclass
class FrameResult:
    frame_id: str
    raw: Optional[Tensor] = None
    model_input: Optional[Tensor] = None
    inference: Optional[InferenceResult] = None
    label: Optional[int] = None
    error: Optional[str] = None


def run_frame(
    graph: Graph,
    pipeline: PipelineSpec,
    image: Image,
    resolver: KernelResolver,
    capture: Capture = Capture.OUTPUT_ONLY,
) -> Tuple[Tensor, Tensor, InferenceResult]:
    """Preprocess one raw image and run it through the graph."""
    model_input = run_pipeline(image, pipeline)
    return image_to_tensor(image), model_input, infer(graph, model_input, resolver, capture)


def load_labels(path: Union[str, Path]) -> Dict[str, int]:
    labels: Dict[str, int] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ReplayError(f"Cannot read labels file {path}: {exc}")
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
            raise ReplayError(f"Labels file {path} line {number}: expected '<filename> <class_index>'")
        labels[parts[0]] = int(parts[1])
    return labels


def _map_frames(compute: Callable[[str], FrameResult], frame_ids: List[str], threads: int, desc: str) -> Iterator[FrameResult]:
    """Compute frames, in parallel when allowed, yielding results in input order."""
    progress = dict(desc=desc, unit="frame", total=len(frame_ids), disable=None)
    if threads <= 1:
        yield from tqdm(map(compute, frame_ids), **progress)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from tqdm(pool.map(compute, frame_ids), **progress)


def _record_frame(session: MonitorSession, frame: FrameResult) -> None:
    if frame.error is not None:
        session.skip(frame.frame_id, frame.error)
        return
    if frame.raw is not None:
        session.log_input(RAW_INPUT_KEY, frame.raw, frame.frame_id)
    session.log_input(MODEL_INPUT_KEY, frame.model_input, frame.frame_id)
    if frame.label is not None:
        session.log_custom(LABEL_KEY, frame.label, frame.frame_id)
    session.on_inf_start(frame.frame_id)
    session.on_inf_stop(frame.inference)


def _write_frames(session: MonitorSession, frames: Iterable[FrameResult]) -> int:
    written = 0
    with session:
        for frame in frames:
            _record_frame(session, frame)
            written += frame.error is None
    return written


def playback_dataset(
    inputs: Union[str, Path],
    graph: Graph,
    pipeline: PipelineSpec,
    out: Union[str, Path],
    resolver: KernelResolver = KernelResolver(ResolverKind.OPTIMIZED),
    capture: Capture = Capture.OUTPUT_ONLY,
    labels: Optional[Union[str, Path]] = None,
    device_label: Optional[str] = None,
    threads: Optional[int] = None,
) -> Path:
    """Run every PPM image of a directory, in filename order, as one frame of an edge trace."""
    settings = get_settings()
    inputs = Path(inputs)
    if not inputs.is_dir():
        raise ReplayError(f"Input directory {inputs} does not exist")
    images = sorted(path.name for path in inputs.iterdir() if path.suffix.lower() == IMAGE_SUFFIX)
    label_map = load_labels(labels) if labels is not None else {}
    for name in sorted(set(label_map) - set(images)):
        logger.warning("Label for unknown image %s ignored", name)

    def compute(name: str) -> FrameResult:
        try:
            image = read_ppm(inputs / name)
        except ImageFormatError as exc:
            return FrameResult(name, error=exc.detail)
        raw, model_input, result = run_frame(graph, pipeline, image, resolver, capture)
        return FrameResult(name, raw, model_input, result, label_map.get(name))

    session = session_begin(
        out,
        run_kind="edge",
        model_name=graph.name,
        model_hash=graph.digest(),
        pipeline_hash=pipeline_hash(pipeline),
        pipeline=pipeline,
        resolver=resolver.kind,
        int8=graph.is_quantized,
        capture=capture,
        faults=list(resolver.faults),
        device_label=device_label or settings.device_label,
    )
    written = _write_frames(session, _map_frames(compute, images, threads or settings.threads, "run"))
    logger.info("Edge run %s: %d frames, %d skipped", out, written, len(session.manifest.skipped))
    return Path(out)


def playback_tensors(
    frames: Mapping[str, Tensor],
    graph: Graph,
    out: Union[str, Path],
    resolver: KernelResolver = KernelResolver(ResolverKind.OPTIMIZED),
    capture: Capture = Capture.OUTPUT_ONLY,
    run_kind: str = "edge",
    labels: Optional[Mapping[str, int]] = None,
) -> Path:
    """Trace already-preprocessed model inputs. No raw input is logged, so such traces cannot be replayed."""
    labels = labels or {}

    def compute(frame_id: str) -> FrameResult:
        x = frames[frame_id]
        return FrameResult(frame_id, model_input=x, inference=infer(graph, x, resolver, capture), label=labels.get(frame_id))

    session = session_begin(
        out,
        run_kind=run_kind,
        model_name=graph.name,
        model_hash=graph.digest(),
        resolver=resolver.kind,
        int8=graph.is_quantized,
        capture=capture,
        faults=list(resolver.faults),
        device_label=get_settings().device_label,
    )
    _write_frames(session, _map_frames(compute, list(frames), 1, run_kind))
    return Path(out)


def replay(
    edge: Union[str, Path],
    graph: Graph,
    pipeline: PipelineSpec,
    out: Union[str, Path],
    capture: Capture = Capture.PER_LAYER,
    allow_int8: bool = False,
    threads: Optional[int] = None,
) -> Path:
    """Play the raw inputs of an edge trace through the reference pipeline with reference kernels."""
    if graph.is_quantized and not allow_int8:
        raise ReplayError(f"Reference graph {graph.name} is quantized; pass allow_int8 to replay it")
    settings = get_settings()
    trace = read_trace(edge)
    resolver = KernelResolver(ResolverKind.REFERENCE)

    def compute(frame_id: str) -> FrameResult:
        raw_records = trace.find(frame_id, RecordKind.INPUT, RAW_INPUT_KEY)
        if not raw_records:
            return FrameResult(frame_id, error="missing raw input")
        labels = trace.find(frame_id, RecordKind.CUSTOM, LABEL_KEY)
        try:
            image = tensor_to_image(trace.load_blob(raw_records[0]))
        except ExrayError as exc:
            return FrameResult(frame_id, error=exc.detail)
        raw, model_input, result = run_frame(graph, pipeline, image, resolver, capture)
        label = int(labels[0].scalar) if labels else None
        return FrameResult(frame_id, raw, model_input, result, label)

    session = session_begin(
        out,
        run_kind="reference",
        model_name=graph.name,
        model_hash=graph.digest(),
        pipeline_hash=pipeline_hash(pipeline),
        pipeline=pipeline,
        resolver=ResolverKind.REFERENCE,
        int8=graph.is_quantized,
        capture=capture,
        device_label=trace.manifest.device_label,
        source_trace=str(edge),
    )
    frame_ids = trace.frame_ids()
    written = _write_frames(session, _map_frames(compute, frame_ids, threads or settings.threads, "replay"))
    skipped = len(session.manifest.skipped)
    if skipped:
        logger.warning("Replay of %s skipped %d of %d frames", edge, skipped, len(frame_ids))
    logger.info("Reference replay %s: %d frames", out, written)
    return Path(out)
