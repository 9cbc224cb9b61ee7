from pathlib import Path

import click

from exray.commands import respond
from exray.graph import load_graph
from exray.imgproc import load_pipeline_spec
from exray.models import Capture
from exray.playback import replay as replay_trace


@click.command("replay", short_help="Replay an edge trace through the reference pipeline.")
@click.option("--edge", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path), help="Edge trace directory.")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, path_type=Path), help="Reference model.")
@click.option("--pipeline", "pipeline_path", required=True, type=click.Path(exists=True, path_type=Path), help="Reference pipeline spec.")
@click.option("--per-layer", is_flag=True, help="Log every layer output.")
@click.option("--allow-int8", is_flag=True, help="Accept a quantized reference model.")
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Reference trace directory to write.")
def replay(edge, model_path, pipeline_path, per_layer, allow_int8, out):
    """Feed the logged raw inputs through reference preprocessing and reference kernels."""
    capture = Capture.PER_LAYER if per_layer else Capture.OUTPUT_ONLY
    trace = replay_trace(edge, load_graph(model_path), load_pipeline_spec(pipeline_path), out, capture, allow_int8)
    respond({"message": "Reference trace recorded", "trace": str(trace), "source": str(edge)})
