from typing import Optional


class ExrayError(Exception):
    """Base error. Carries a status code and a human readable detail, like an HTTP error."""

    status_code = 2

    def __init__(self, detail: str, status_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if status_code is not None:
            self.status_code = status_code


class TensorFormatError(ExrayError):
    pass


class CalibrationError(ExrayError):
    pass


class QuantizationError(ExrayError):
    pass


class NonFiniteError(QuantizationError):
    def __init__(self, index: tuple):
        super().__init__(f"Non-finite input element at index {index}")
        self.index = index


class ImageFormatError(ExrayError):
    def __init__(self, detail: str, offset: int):
        super().__init__(f"{detail} (byte offset {offset})")
        self.offset = offset


class PipelineError(ExrayError):
    pass


class GraphLoadError(ExrayError):
    def __init__(self, detail: str, layer: Optional[int] = None):
        prefix = f"Layer {layer}: " if layer is not None else ""
        super().__init__(prefix + detail)
        self.layer = layer


class InferenceError(ExrayError):
    pass


class MonitorError(ExrayError):
    pass


class TraceFormatError(ExrayError):
    def __init__(self, detail: str, line: Optional[int] = None):
        suffix = f" (line {line})" if line is not None else ""
        super().__init__(detail + suffix)
        self.line = line


class ReplayError(ExrayError):
    pass


class AlignmentError(ExrayError):
    pass


class StructuralMismatchError(ExrayError):
    """Edge and reference graphs do not line up layer for layer. This is a finding too."""


class AssertionPluginError(ExrayError):
    pass
