from pathlib import Path

import click

from exray.commands import respond
from exray.monitor import read_trace, trace_stats


@click.command("inspect", short_help="Summarize a trace directory.")
@click.option("--trace", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
def inspect(trace):
    """Validate a trace and print its manifest with storage statistics."""
    reader = read_trace(trace)
    respond({
        "message": "Trace is well formed",
        "manifest": reader.manifest.dict(exclude={"pipeline"}),
        "stats": trace_stats(trace).dict(),
    })
