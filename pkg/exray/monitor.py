"""Instrumentation hooks and the on-disk trace directory.

A trace directory holds `manifest.json`, `records.jsonl` (one TraceRecord per line) and
`blobs/NNNNNN.ten`, one tensor file per blob-carrying record.
"""

import json
import logging
import os
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

from pydantic import ValidationError

from exray.errors import MonitorError, TensorFormatError, TraceFormatError
from exray.models import Capture, Manifest, RecordKind, SkippedFrame, TraceRecord, TraceStats
from exray.tensor import Tensor, decode_tensor, encode_tensor

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "records.jsonl"
BLOB_DIR = "blobs"

INFERENCE_KEY = "inference"
OUTPUT_KEY = "output"
RAW_INPUT_KEY = "raw_input"
MODEL_INPUT_KEY = "model_input"
LABEL_KEY = "label"
LAYER_LATENCY_KEY = "layer_latency"
MEMORY_KEY = "analytic_memory_bytes"
SENSOR_WINDOW_KEY = "sensor_quiet_window"


def _record_line(record: TraceRecord) -> str:
    return json.dumps(record.dict(exclude_none=True), separators=(",", ":")) + "\n"


class MonitorSession:
    """One writer for one trace directory. Hooks must be called from a single thread."""

    def __init__(self, directory: Path, manifest: Manifest):
        self.directory = directory
        self.manifest = manifest
        self._seq = 0
        self._blobs = 0
        self._frames: "OrderedDict[str, None]" = OrderedDict()
        self._inference: Optional[tuple] = None
        self._sensor_window: Optional[tuple] = None
        self._closed = False
        try:
            (directory / BLOB_DIR).mkdir(parents=True, exist_ok=True)
            self._write_manifest()
            self._records = open(directory / RECORDS_FILE, "w", encoding="utf-8")
        except OSError as exc:
            raise MonitorError(f"Cannot create trace directory {directory}: {exc}")

    def __enter__(self) -> "MonitorSession":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None and not self._closed:
            self.manifest.partial = True
        self.close()

    @property
    def frame_ids(self) -> List[str]:
        return list(self._frames)

    ### WRITING ###

    def _write_manifest(self) -> None:
        path = self.directory / MANIFEST_FILE
        path.write_text(self.manifest.json(indent=2), encoding="utf-8")

    def _fail(self, action: str, exc: OSError) -> MonitorError:
        self.manifest.partial = True
        try:
            self._write_manifest()
        except OSError:
            logger.error("Could not flag trace %s as partial", self.directory)
        return MonitorError(f"Failed to {action} in trace {self.directory}: {exc}")

    def _store_blob(self, tensor: Tensor) -> str:
        ref = f"{BLOB_DIR}/{self._blobs:06d}.ten"
        try:
            (self.directory / ref).write_bytes(encode_tensor(tensor))
        except OSError as exc:
            raise self._fail(f"write blob {ref}", exc)
        self._blobs += 1
        return ref

    def _emit(self, frame_id: str, key: str, kind: RecordKind, value=None, **fields) -> TraceRecord:
        if self._closed:
            raise MonitorError("Session is closed")
        if isinstance(value, Tensor):
            fields["blob"] = self._store_blob(value)
        elif isinstance(value, str):
            fields["text"] = value
        elif value is not None:
            fields["scalar"] = float(value)
        try:
            record = TraceRecord(seq=self._seq, frame_id=frame_id, key=key, kind=kind, **fields)
        except ValidationError as exc:
            raise MonitorError(f"Invalid {kind.value} record {key!r}: {exc}")
        try:
            self._records.write(_record_line(record))
        except OSError as exc:
            raise self._fail("append record", exc)
        self._seq += 1
        self._frames.setdefault(frame_id)
        return record

    def _flush(self) -> None:
        try:
            self._records.flush()
        except OSError as exc:
            raise self._fail("flush records", exc)

    ### HOOKS ###

    def _frame(self, frame_id: Optional[str]) -> str:
        if frame_id is not None:
            return frame_id
        if self._inference is not None:
            return self._inference[0]
        if not self._frames:
            raise MonitorError("No current frame; pass frame_id or call on_inf_start first")
        return next(reversed(self._frames))

    def on_inf_start(self, frame_id: str) -> None:
        if self._inference is not None:
            raise MonitorError(f"on_inf_start for {frame_id!r} while frame {self._inference[0]!r} is still running")
        self._inference = (frame_id, time.perf_counter_ns())

    def on_inf_stop(self, result) -> None:
        """Close the running frame with an InferenceResult or a bare output Tensor.

        The inference span is the runtime's own when a result is given, else the hook span.
        """
        t_stop = time.perf_counter_ns()
        if self._inference is None:
            raise MonitorError("on_inf_stop without a matching on_inf_start")
        frame_id, t_start = self._inference
        self._inference = None

        if isinstance(result, Tensor):
            self._emit(frame_id, INFERENCE_KEY, RecordKind.LATENCY, t_stop - t_start, t_start_ns=t_start, t_end_ns=t_stop)
            self._emit(frame_id, OUTPUT_KEY, RecordKind.OUTPUT, result)
            self._flush()
            return

        self._emit(
            frame_id,
            INFERENCE_KEY,
            RecordKind.LATENCY,
            result.latency_ns,
            t_start_ns=result.t_start_ns,
            t_end_ns=result.t_end_ns,
        )
        if result.layer_spans:
            origin = result.layer_spans[0][0]
            rows = [
                [index, layer_type.value, start - origin, end - start]
                for index, ((start, end), layer_type) in enumerate(zip(result.layer_spans, result.layer_types))
            ]
            self._emit(
                frame_id, LAYER_LATENCY_KEY, RecordKind.LATENCY, json.dumps(rows, separators=(",", ":")),
                t_start_ns=origin, t_end_ns=result.layer_spans[-1][1],
            )
        if self.manifest.capture == Capture.PER_LAYER and result.layer_outputs is not None:
            for index, (output, layer_type) in enumerate(zip(result.layer_outputs, result.layer_types)):
                self._emit(frame_id, layer_type.value, RecordKind.LAYER_OUTPUT, output, layer_index=index)
        self._emit(frame_id, OUTPUT_KEY, RecordKind.OUTPUT, result.output)
        self._emit(frame_id, MEMORY_KEY, RecordKind.CUSTOM, result.memory_bytes)
        self._flush()

    def on_sensor_stop(self, frame_id: Optional[str] = None, **readings) -> None:
        """Open the sensor-quiet window, logging any readings taken as the sensors stop."""
        if self._sensor_window is not None:
            raise MonitorError("on_sensor_stop while sensors are already stopped")
        frame_id = self._frame(frame_id)
        for key, value in readings.items():
            self.log_sensor(key, value, frame_id)
        self._sensor_window = (frame_id, time.perf_counter_ns())

    def on_sensor_start(self) -> None:
        t_end = time.perf_counter_ns()
        if self._sensor_window is None:
            raise MonitorError("on_sensor_start without a matching on_sensor_stop")
        frame_id, t_start = self._sensor_window
        self._sensor_window = None
        self._emit(frame_id, SENSOR_WINDOW_KEY, RecordKind.SENSOR, t_end - t_start, t_start_ns=t_start, t_end_ns=t_end)
        self._flush()

    def log_input(self, key: str, tensor: Tensor, frame_id: Optional[str] = None) -> TraceRecord:
        return self._emit(self._frame(frame_id), key, RecordKind.INPUT, tensor)

    def log_custom(self, key: str, value: Union[Tensor, float, str], frame_id: Optional[str] = None) -> TraceRecord:
        return self._emit(self._frame(frame_id), key, RecordKind.CUSTOM, value)

    def log_sensor(self, key: str, value: Union[float, str], frame_id: Optional[str] = None) -> TraceRecord:
        return self._emit(self._frame(frame_id), key, RecordKind.SENSOR, value)

    def skip(self, frame_id: str, reason: str) -> None:
        logger.warning("Skipping frame %s: %s", frame_id, reason)
        self.manifest.skipped.append(SkippedFrame(frame_id=frame_id, reason=reason))

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._inference is not None:
            logger.warning("Closing trace %s with frame %s still running", self.directory, self._inference[0])
            self.manifest.partial = True
        self.manifest.frames = len(self._frames)
        self.manifest.finished = not self.manifest.partial
        try:
            self._records.flush()
            os.fsync(self._records.fileno())
            self._records.close()
            self._write_manifest()
        except OSError as exc:
            raise MonitorError(f"Failed to finalize trace {self.directory}: {exc}")
        logger.info("Closed trace %s: %d frames, %d records", self.directory, self.manifest.frames, self._seq)


def session_begin(directory: Union[str, Path], **manifest_fields) -> MonitorSession:
    """Open a new trace directory. Manifest fields follow `exray.models.Manifest`."""
    directory = Path(directory)
    if (directory / RECORDS_FILE).exists():
        raise MonitorError(f"Trace directory {directory} already holds a trace")
    manifest_fields.setdefault("started_at", datetime.now(timezone.utc).isoformat())
    manifest_fields.setdefault("wall_clock_anchor_ns", time.time_ns())
    manifest_fields.setdefault("monotonic_anchor_ns", time.perf_counter_ns())
    try:
        manifest = Manifest(**manifest_fields)
    except ValidationError as exc:
        raise MonitorError(f"Invalid manifest fields: {exc}")
    return MonitorSession(directory, manifest)


### READING ###

@dataclass(frozen=True)
class LayerSpan:
    layer_index: int
    layer_type: str
    t_start_ns: int
    t_end_ns: int

    @property
    def duration_ns(self) -> int:
        return self.t_end_ns - self.t_start_ns


def layer_spans(record: TraceRecord) -> List[LayerSpan]:
    """Unpack a `layer_latency` record: rows of [index, type, offset from t_start_ns, duration]."""
    try:
        rows = json.loads(record.text or "")
        return [
            LayerSpan(int(index), str(layer_type), record.t_start_ns + int(offset), record.t_start_ns + int(offset) + int(duration))
            for index, layer_type, offset, duration in rows
        ]
    except (ValueError, TypeError) as exc:
        raise TraceFormatError(f"Malformed layer latency record {record.seq} in frame {record.frame_id}: {exc}")


class TraceReader:
    """A parsed trace. Records are validated up front, blobs load on demand."""

    def __init__(self, directory: Path, manifest: Manifest, records: List[TraceRecord]):
        self.directory = directory
        self.manifest = manifest
        self.records = records

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def load_blob(self, record: TraceRecord) -> Tensor:
        if record.blob is None:
            raise TraceFormatError(f"Record {record.seq} ({record.key}) carries no blob")
        path = self.directory / record.blob
        try:
            return decode_tensor(path.read_bytes(), str(path))
        except OSError as exc:
            raise TraceFormatError(f"Cannot read blob {path}: {exc}")
        except TensorFormatError as exc:
            raise TraceFormatError(exc.detail)

    def frame_ids(self) -> List[str]:
        return list(OrderedDict.fromkeys(record.frame_id for record in self.records))

    def by_frame(self) -> Dict[str, List[TraceRecord]]:
        frames: Dict[str, List[TraceRecord]] = OrderedDict()
        for record in self.records:
            frames.setdefault(record.frame_id, []).append(record)
        return frames

    def find(self, frame_id: str, kind: RecordKind, key: Optional[str] = None) -> List[TraceRecord]:
        return [
            record for record in self.records
            if record.frame_id == frame_id and record.kind == kind and (key is None or record.key == key)
        ]


def _read_manifest(directory: Path) -> Manifest:
    path = directory / MANIFEST_FILE
    try:
        return Manifest(**json.loads(path.read_text(encoding="utf-8")))
    except OSError as exc:
        raise TraceFormatError(f"Cannot read manifest {path}: {exc}")
    except (ValueError, TypeError, ValidationError) as exc:
        raise TraceFormatError(f"Invalid manifest {path}: {exc}")


def read_trace(directory: Union[str, Path]) -> TraceReader:
    directory = Path(directory)
    if not directory.is_dir():
        raise TraceFormatError(f"Trace directory {directory} does not exist")
    manifest = _read_manifest(directory)
    path = directory / RECORDS_FILE
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise TraceFormatError(f"Cannot read records {path}: {exc}")

    records: List[TraceRecord] = []
    blobs = set()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = TraceRecord(**json.loads(line))
        except (ValueError, TypeError, ValidationError) as exc:
            raise TraceFormatError(f"Malformed record in {path}: {exc}", number)
        if records and record.seq <= records[-1].seq:
            raise TraceFormatError(f"seq {record.seq} does not increase after {records[-1].seq}", number)
        if record.blob is not None:
            if record.blob in blobs:
                raise TraceFormatError(f"Blob {record.blob} referenced more than once", number)
            if not (directory / record.blob).is_file():
                raise TraceFormatError(f"Missing blob {directory / record.blob}", number)
            blobs.add(record.blob)
        records.append(record)
    if manifest.partial:
        logger.warning("Trace %s is flagged partial", directory)
    return TraceReader(directory, manifest, records)


def trace_stats(directory: Union[str, Path]) -> TraceStats:
    """Storage accounting for a trace: record stream and blob bytes, overall and per frame."""
    trace = read_trace(directory)
    directory = Path(directory)
    records_bytes = (directory / RECORDS_FILE).stat().st_size
    blob_refs = [record.blob for record in trace if record.blob is not None]
    blob_bytes = sum((directory / ref).stat().st_size for ref in blob_refs)
    frames = len(trace.frame_ids())
    per_frame = max(frames, 1)
    return TraceStats(
        frames=frames,
        records=len(trace),
        records_bytes=records_bytes,
        blob_bytes=blob_bytes,
        blobs=len(blob_refs),
        records_bytes_per_frame=records_bytes / per_frame,
        blob_bytes_per_frame=blob_bytes / per_frame,
        kinds=dict(Counter(record.kind for record in trace)),
    )
