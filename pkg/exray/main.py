import click

from exray import __version__
from exray.commands import assets, layers, quantize, replay, run, stats, validate
from exray.config import configure_logging, get_settings
from exray.errors import ExrayError


class ExrayGroup(click.Group):
    """Command group that turns domain errors into a message on stderr and exit status 2."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except ExrayError as exc:
            click.echo(f"Error: {exc.detail}", err=True)
            raise click.exceptions.Exit(exc.status_code)


@click.group(cls=ExrayGroup)
@click.version_option(__version__, prog_name="exray")
@click.option("--log-level", default=None, help="Logging level, overrides EXRAY_LOG_LEVEL.")
def cli(log_level):
    """Validate edge ML deployments against a trusted reference."""
    configure_logging(log_level or get_settings().log_level)


cli.add_command(run.run)
cli.add_command(quantize.quantize)
cli.add_command(replay.replay)
cli.add_command(validate.validate)
cli.add_command(layers.layers)
cli.add_command(stats.inspect)
cli.add_command(assets.demo_assets)
