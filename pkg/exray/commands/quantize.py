from pathlib import Path

import click

from exray.commands import respond
from exray.errors import CalibrationError
from exray.graph import load_graph, save_graph
from exray.imgproc import load_pipeline_spec, read_ppm, run_pipeline
from exray.models import DType
from exray.playback import IMAGE_SUFFIX
from exray.quantizer import quantize_graph
from exray.tensor import Tensor, as_float, load_tensor

TENSOR_SUFFIX = ".ten"


def load_calibration(directory: Path, pipeline_path=None):
    """Calibration inputs from `.ten` tensors and, given a pipeline, `.ppm` images."""
    pipeline = load_pipeline_spec(pipeline_path) if pipeline_path is not None else None
    inputs = []
    for path in sorted(directory.iterdir()):
        suffix = path.suffix.lower()
        if suffix == TENSOR_SUFFIX:
            tensor = load_tensor(path)
            inputs.append(tensor if tensor.dtype == DType.F32 else Tensor.f32(as_float(tensor)))
        elif suffix == IMAGE_SUFFIX:
            if pipeline is None:
                raise CalibrationError(f"Calibration image {path.name} needs --pipeline")
            inputs.append(run_pipeline(read_ppm(path), pipeline))
    return inputs


@click.command("quantize", short_help="Post-training int8 quantization of a float model.")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--calib", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path), help="Directory of .ten tensors or .ppm images.")
@click.option("--pipeline", "pipeline_path", type=click.Path(exists=True, path_type=Path), default=None, help="Pipeline for .ppm calibration images.")
@click.option("--scheme", type=click.Choice(["per_tensor", "per_channel"]), default="per_tensor", show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Directory for the quantized model.")
def quantize(model_path, calib, pipeline_path, scheme, out):
    """Calibrate activation ranges on sample inputs and write a full-integer model."""
    graph = load_graph(model_path)
    inputs = load_calibration(calib, pipeline_path)
    quantized = quantize_graph(graph, inputs, per_channel=scheme == "per_channel")
    save_graph(quantized, out)
    respond({
        "message": "Model quantized",
        "model": str(out),
        "scheme": scheme,
        "calibration_inputs": len(inputs),
        "layers": len(quantized.layers),
    })
