import json
from typing import Any, Dict

import click


def respond(payload: Dict[str, Any], success: bool = True) -> None:
    """Print a command result as indented JSON on stdout."""
    click.echo(json.dumps({"success": success, **payload}, indent=2, default=str))
