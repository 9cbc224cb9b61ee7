from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field, root_validator, validator


class DType(str, Enum):
    F32 = "F32"
    U8 = "U8"
    I8 = "I8"
    I32 = "I32"


class QuantScheme(str, Enum):
    PER_TENSOR_AFFINE = "PerTensorAffine"
    PER_TENSOR_SYMMETRIC = "PerTensorSymmetric"
    PER_CHANNEL_SYMMETRIC = "PerChannelSymmetric"


class QuantParams(BaseModel):
    scheme: QuantScheme
    scale: List[float]
    zero_point: int = 0
    channel_axis: Optional[int] = None
    calib_min: List[float]
    calib_max: List[float]

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def check_scheme(cls, values):
        scheme = values["scheme"]
        scale, lo, hi = values["scale"], values["calib_min"], values["calib_max"]
        if not scale or any(s <= 0 for s in scale):
            raise ValueError("scale must be a non-empty list of positive values")
        if not (len(scale) == len(lo) == len(hi)):
            raise ValueError("scale, calib_min and calib_max must have equal length")
        if scheme == QuantScheme.PER_CHANNEL_SYMMETRIC:
            if values.get("channel_axis") is None:
                raise ValueError("per-channel quantization requires channel_axis")
        else:
            if values.get("channel_axis") is not None:
                raise ValueError("channel_axis is only valid for per-channel quantization")
            if len(scale) != 1:
                raise ValueError("per-tensor quantization takes exactly one scale")
        if scheme == QuantScheme.PER_TENSOR_AFFINE:
            if not lo[0] < hi[0]:
                raise ValueError("calib_min must be strictly below calib_max")
        else:
            if values.get("zero_point", 0) != 0:
                raise ValueError("symmetric schemes have zero_point 0")
            if any(a > b for a, b in zip(lo, hi)):
                raise ValueError("calib_min must not exceed calib_max")
        return values

    @property
    def per_channel(self) -> bool:
        return self.scheme == QuantScheme.PER_CHANNEL_SYMMETRIC

    @property
    def symmetric(self) -> bool:
        return self.scheme != QuantScheme.PER_TENSOR_AFFINE


### PREPROCESSING ###

class ChannelOrder(str, Enum):
    RGB = "RGB"
    BGR = "BGR"


class Resizer(str, Enum):
    BILINEAR = "Bilinear"
    AREA = "AreaAverage"


ROTATIONS = (0, 90, 180, 270)


class PipelineSpec(BaseModel):
    channel_order: ChannelOrder
    resizer: Resizer
    target_h: int
    target_w: int
    norm_lo: float
    norm_hi: float
    rotation: int

    class Config:
        extra = "forbid"

    @validator("target_h", "target_w")
    def check_target(cls, value):
        if value < 1:
            raise ValueError("target dimensions must be at least 1")
        return value

    @validator("rotation")
    def check_rotation(cls, value):
        if value not in ROTATIONS:
            raise ValueError("rotation must be one of 0, 90, 180, 270")
        return value

    @root_validator(skip_on_failure=True)
    def check_range(cls, values):
        if not values["norm_lo"] < values["norm_hi"]:
            raise ValueError("norm_lo must be below norm_hi")
        return values


### MODEL FILE ###

class LayerType(str, Enum):
    CONV2D = "Conv2D"
    DEPTHWISE_CONV2D = "DepthwiseConv2D"
    FULLY_CONNECTED = "FullyConnected"
    AVERAGE_POOL2D = "AveragePool2D"
    MEAN = "Mean"
    PAD = "Pad"
    ADD = "Add"
    SOFTMAX = "Softmax"
    QUANTIZE = "Quantize"
    DEQUANTIZE = "Dequantize"


BOUNDARY_LAYERS = (LayerType.QUANTIZE, LayerType.DEQUANTIZE)


class Activation(str, Enum):
    NONE = "None"
    RELU = "ReLU"
    RELU6 = "ReLU6"


class LayerSpec(BaseModel):
    index: int
    type: LayerType
    kernel: Optional[Tuple[int, int]] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int, int, int] = (0, 0, 0, 0)  # top, bottom, left, right
    activation: Activation = Activation.NONE
    pool: Optional[Tuple[int, int]] = None
    operand: Optional[int] = None
    weights: Optional[str] = None
    bias: Optional[str] = None
    output_quant: Optional[QuantParams] = None

    class Config:
        extra = "forbid"


class ModelFile(BaseModel):
    name: str
    input_shape: List[int]
    input_dtype: DType = DType.F32
    input_quant: Optional[QuantParams] = None
    layers: List[LayerSpec]
    output_index: int

    class Config:
        extra = "forbid"


### RUNTIME ###

class ResolverKind(str, Enum):
    REFERENCE = "reference"
    OPTIMIZED = "optimized"


class Capture(str, Enum):
    OUTPUT_ONLY = "OutputOnly"
    PER_LAYER = "PerLayer"


class FaultMode(str, Enum):
    WRAP_ACCUMULATOR = "WrapAccumulator"
    NARROW_ACCUMULATOR = "NarrowAccumulator"
    TRUNCATE_REQUANT = "TruncateRequant"
    SLOW_KERNEL = "SlowKernel"


class FaultSpec(BaseModel):
    target: Union[int, LayerType]
    mode: FaultMode
    factor: int = 1

    class Config:
        extra = "forbid"

    @validator("factor")
    def check_factor(cls, value):
        if value < 1:
            raise ValueError("SlowKernel factor must be at least 1")
        return value

    def matches(self, index: int, layer_type: LayerType) -> bool:
        if isinstance(self.target, LayerType):
            return self.target == layer_type
        return self.target == index


### TRACES ###

class RecordKind(str, Enum):
    INPUT = "Input"
    OUTPUT = "Output"
    LAYER_OUTPUT = "LayerOutput"
    LATENCY = "Latency"
    SENSOR = "Sensor"
    CUSTOM = "Custom"


class TraceRecord(BaseModel):
    seq: int
    frame_id: str
    key: str
    kind: RecordKind
    layer_index: Optional[int] = None
    t_start_ns: Optional[int] = None
    t_end_ns: Optional[int] = None
    blob: Optional[str] = None
    scalar: Optional[float] = None
    text: Optional[str] = None

    class Config:
        extra = "forbid"
        use_enum_values = True

    @root_validator(skip_on_failure=True)
    def check_payload(cls, values):
        present = [name for name in ("blob", "scalar", "text") if values.get(name) is not None]
        if len(present) != 1:
            raise ValueError("exactly one of blob, scalar, text must be present")
        if values["kind"] == RecordKind.LAYER_OUTPUT and values.get("layer_index") is None:
            raise ValueError("LayerOutput records require layer_index")
        if values["kind"] == RecordKind.LATENCY and (
            values.get("t_start_ns") is None or values.get("t_end_ns") is None
        ):
            raise ValueError("Latency records require both timestamps")
        return values


class SkippedFrame(BaseModel):
    frame_id: str
    reason: str


class Manifest(BaseModel):
    format_version: int = 1
    run_kind: str = "edge"
    model_name: Optional[str] = None
    model_hash: Optional[str] = None
    pipeline_hash: Optional[str] = None
    pipeline: Optional[PipelineSpec] = None
    resolver: ResolverKind = ResolverKind.OPTIMIZED
    int8: bool = False
    capture: Capture = Capture.OUTPUT_ONLY
    faults: List[FaultSpec] = Field(default_factory=list)
    device_label: str = "desk"
    started_at: Optional[str] = None
    wall_clock_anchor_ns: Optional[int] = None
    monotonic_anchor_ns: Optional[int] = None
    memory_accounting: str = "analytic"
    source_trace: Optional[str] = None
    frames: int = 0
    skipped: List[SkippedFrame] = Field(default_factory=list)
    partial: bool = False
    finished: bool = False

    class Config:
        extra = "forbid"


class TraceStats(BaseModel):
    frames: int
    records: int
    records_bytes: int
    blob_bytes: int
    blobs: int
    records_bytes_per_frame: float
    blob_bytes_per_frame: float
    kinds: Dict[str, int] = Field(default_factory=dict)


### VALIDATION ###

class VerdictStatus(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    INAPPLICABLE = "inapplicable"


class Verdict(BaseModel):
    name: str
    verdict: VerdictStatus
    cause: Optional[str] = None
    inputs: List[str] = Field(default_factory=list)
    evidence: Dict[str, Any] = Field(default_factory=dict)


class LayerDivergence(BaseModel):
    layer_index: int
    layer_type: str
    reference_index: Optional[int] = None
    rmse: float
    scale: float
    rmse_hat: Optional[float] = None
    degenerate: bool = False
    worst_channel: Optional[int] = None
    worst_channel_rmse_hat: Optional[float] = None


class AccuracySummary(BaseModel):
    frames: int
    agreement: float
    labelled_frames: int = 0
    edge_accuracy: Optional[float] = None
    reference_accuracy: Optional[float] = None


class LayerStage(BaseModel):
    ran: bool = False
    reason: Optional[str] = None
    input: Optional[LayerDivergence] = None
    series: List[LayerDivergence] = Field(default_factory=list)
    divergence: Optional[Union[int, str]] = None
    channel_findings: List[Dict[str, Any]] = Field(default_factory=list)


class LatencyRow(BaseModel):
    layer_type: str
    edge_count: int = 0
    reference_count: int = 0
    edge_ms: float = 0.0
    reference_ms: float = 0.0


class Straggler(BaseModel):
    layer_index: int
    layer_type: str
    edge_share: float
    reference_share: float
    factor: float


class LatencyReport(BaseModel):
    rows: List[LatencyRow] = Field(default_factory=list)
    edge_total_ms: float = 0.0
    reference_total_ms: float = 0.0
    edge_inference_ms: float = 0.0
    reference_inference_ms: float = 0.0
    stragglers: List[Straggler] = Field(default_factory=list)


class ValidationReport(BaseModel):
    summary: Dict[str, Any] = Field(default_factory=dict)
    accuracy: Optional[AccuracySummary] = None
    layers: LayerStage = Field(default_factory=LayerStage)
    latency: LatencyReport = Field(default_factory=LatencyReport)
    assertions: List[Verdict] = Field(default_factory=list)
