from pathlib import Path

import click

from exray.commands import respond
from exray.graph import load_graph
from exray.imgproc import load_pipeline_spec
from exray.models import Capture, ResolverKind
from exray.playback import playback_dataset
from exray.runtime import KernelResolver, parse_fault

EXISTING = click.Path(exists=True, path_type=Path)


@click.command("run", short_help="Run a dataset through an instrumented model.")
@click.option("--model", "model_path", required=True, type=EXISTING, help="Model directory or model.json.")
@click.option("--pipeline", "pipeline_path", required=True, type=EXISTING, help="Preprocessing spec JSON.")
@click.option("--inputs", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path), help="Directory of PPM images.")
@click.option("--labels", type=EXISTING, default=None, help="Labels file, '<filename> <class_index>' per line.")
@click.option(
    "--kernels",
    type=click.Choice([kind.value for kind in ResolverKind]),
    default=ResolverKind.OPTIMIZED.value,
    show_default=True,
)
@click.option("--fault", "faults", multiple=True, help="Fault to inject, type=MODE@layer or type=MODE@LayerType.")
@click.option("--per-layer", is_flag=True, help="Log every layer output.")
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Trace directory to write.")
def run(model_path, pipeline_path, inputs, labels, kernels, faults, per_layer, out):
    """Play a directory of images through the edge pipeline and record a trace."""
    parsed = []
    for text in faults:
        try:
            parsed.append(parse_fault(text))
        except ValueError as exc:
            raise click.BadParameter(str(exc), param_hint="--fault")

    graph = load_graph(model_path)
    pipeline = load_pipeline_spec(pipeline_path)
    resolver = KernelResolver(ResolverKind(kernels), tuple(parsed))
    capture = Capture.PER_LAYER if per_layer else Capture.OUTPUT_ONLY
    trace = playback_dataset(inputs, graph, pipeline, out, resolver, capture, labels)
    respond({"message": "Trace recorded", "trace": str(trace), "faults": [f.dict() for f in parsed]})
