from pathlib import Path

import click

from exray.commands import respond
from exray.validator import compare_series

TRACE_DIR = click.Path(exists=True, file_okay=False, path_type=Path)


@click.command("layers", short_help="Per-layer rmse_hat of several traces against one baseline.")
@click.option("--ref", required=True, type=TRACE_DIR, help="Baseline trace with per-layer capture.")
@click.option("--candidate", "candidates", required=True, multiple=True, type=TRACE_DIR, help="Trace to compare, repeatable.")
def layers(ref, candidates):
    """Print one rmse_hat series per candidate, layers paired by position."""
    series = {}
    for name, (model_input, divergences) in compare_series(ref, candidates).items():
        rows = [model_input] if model_input is not None else []
        rows += divergences
        series[name] = [
            {
                "layer_index": d.layer_index,
                "layer_type": d.layer_type,
                "rmse_hat": d.rmse_hat,
                "worst_channel_rmse_hat": d.worst_channel_rmse_hat,
            }
            for d in rows
        ]
    respond({"message": "Layer series computed", "reference": str(ref), "series": series})
