from pathlib import Path

import click

from exray.assertions import load_assertion_file
from exray.commands import respond
from exray.playback import load_labels
from exray.validator import EXIT_CLEAN, exit_status, run_validation, write_report

TRACE_DIR = click.Path(exists=True, file_okay=False, path_type=Path)


@click.command("validate", short_help="Compare an edge trace with a reference trace.")
@click.option("--edge", required=True, type=TRACE_DIR, help="Edge trace directory.")
@click.option("--ref", required=True, type=TRACE_DIR, help="Reference trace directory.")
@click.option("--labels", type=click.Path(exists=True, path_type=Path), default=None, help="Ground-truth labels file.")
@click.option("--assertions", type=click.Path(exists=True, path_type=Path), default=None, help="File listing external assertion executables.")
@click.option("--jump-delta", type=float, default=None, help="Absolute rmse_hat rise that counts as a jump.")
@click.option("--jump-ratio", type=float, default=None, help="Relative rmse_hat rise that counts as a jump.")
@click.option("--jump-floor", type=float, default=None, help="rmse_hat that counts as a jump after exact agreement.")
@click.option("--force-layers", is_flag=True, help="Run the per-layer stage even when outputs agree.")
@click.option("--report", required=True, type=click.Path(path_type=Path), help="Where to write the JSON report.")
@click.pass_context
def validate(ctx, edge, ref, labels, assertions, jump_delta, jump_ratio, jump_floor, force_layers, report):
    """Exit 0 when clean, 1 on findings, 2 when a stage could not complete."""
    label_map = load_labels(labels) if labels is not None else None
    executables = load_assertion_file(assertions) if assertions is not None else []
    result = run_validation(
        edge,
        ref,
        labels=label_map,
        assertions=executables,
        jump_delta=jump_delta,
        jump_ratio=jump_ratio,
        jump_floor=jump_floor,
        force_layers=force_layers,
    )
    write_report(result, report)
    status = exit_status(result)
    respond(
        {"message": "Validation finished", "report": str(report), "status": status, **result.summary},
        success=status == EXIT_CLEAN,
    )
    ctx.exit(status)
