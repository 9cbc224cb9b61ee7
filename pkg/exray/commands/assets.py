from pathlib import Path

import click

from exray.commands import respond
from exray.synth import write_demo_assets


@click.command("demo-assets", short_help="Write a synthetic dataset, model and pipelines.")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--images", default=20, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
def demo_assets(out, images, seed):
    """Correct and buggy pipelines for exercising run, replay and validate end to end."""
    respond({"message": "Demo assets written", **write_demo_assets(out, images, seed)})
