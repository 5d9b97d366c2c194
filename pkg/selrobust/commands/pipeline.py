"""Sweep commands: sweep, report and status."""
import json
import logging
import sys
from pathlib import Path

import click

from selrobust.config import list_overrides
from selrobust.errors import ConfigError

logger = logging.getLogger(__name__)


@click.command()
@click.option("--workers", type=int, default=None, help="Parallel worker processes")
@click.option("--alphas", multiple=True, help="Alpha values, comma-separated or repeated")
@click.option("--seeds", multiple=True, help="Seeds, comma-separated or repeated")
@click.option("--output-dir", default=None, help="Sweep output directory")
@click.pass_context
def sweep(ctx, workers, alphas, seeds, output_dir):
    """Train and measure every (alpha, seed) cell, then write the report."""
    from selrobust.output import print_error, print_stage_result
    from selrobust.runner import run_sweep

    logger.debug("Pipeline 'sweep' invoked: workers=%s, alphas=%s, seeds=%s", workers, alphas, seeds)
    try:
        alpha_values = list_overrides(list(alphas))
        seed_values = list_overrides(list(seeds))
    except ConfigError as exc:
        print_error(str(exc))
        sys.exit(1)
    overrides = {
        "workers": workers,
        "output_dir": output_dir,
        "alphas": alpha_values,
        "seeds": [int(s) for s in seed_values] if seed_values else None,
    }
    rc = run_sweep(settings=ctx.obj, overrides=overrides)
    print_stage_result("sweep", rc, output_dir or ctx.obj.get("output_dir", ""))
    if rc != 0:
        sys.exit(rc)


@click.command()
@click.option("--sweep-dir", required=True, type=click.Path(exists=True), help="Sweep output directory")
@click.option("--out", default=None, help="Report directory (default: <sweep-dir>/report)")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.pass_context
def report(ctx, sweep_dir, out, fmt):
    """Re-emit consolidated tables and the bootstrap summary from cell measurements."""
    from selrobust.output import print_stage_result
    from selrobust.runner import run_report

    logger.debug("Pipeline 'report' invoked: sweep_dir=%s, out=%s, format=%s", sweep_dir, out, fmt)
    rc = run_report(sweep_dir=sweep_dir, settings=ctx.obj, out=out, format=fmt)
    print_stage_result("report", rc, out or str(Path(sweep_dir) / "report"))
    if rc != 0:
        sys.exit(rc)


@click.command()
@click.option("--sweep-dir", required=True, help="Sweep output directory")
@click.pass_context
def status(ctx, sweep_dir):
    """Show cell states of a sweep."""
    from rich.table import Table

    from selrobust.output import console, print_error
    from selrobust.sweep import STATUS_NAME

    logger.debug("Pipeline 'status' invoked: sweep_dir=%s", sweep_dir)
    status_path = Path(sweep_dir) / STATUS_NAME
    if not status_path.is_file():
        print_error(f"No {STATUS_NAME} in {sweep_dir}. Run 'selrobust sweep' first.")
        sys.exit(1)
    try:
        data = json.loads(status_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, OSError) as exc:
        print_error(f"Cannot read {status_path}: {exc}")
        sys.exit(1)

    table = Table(title=f"Sweep Status: {sweep_dir}")
    table.add_column("PGD train", style="dim")
    table.add_column("Alpha", style="cyan")
    table.add_column("Seed")
    table.add_column("Status", style="bold")
    table.add_column("Detail")

    for cell in data.get("cells", []):
        if cell.get("status") == "ok":
            state = "[green]done[/green]"
            detail = "[dim]cached[/dim]" if cell.get("cached") else ""
        else:
            state = "[red]failed[/red]"
            detail = f"[red]{cell.get('error', '')}[/red]"
        table.add_row(str(cell.get("pgd_train_steps", 0)), str(cell.get("alpha")),
                      str(cell.get("seed")), state, detail)

    console.print(table)
    console.print(f"completed: {data.get('completed', 0)}  failed: {data.get('failed', 0)}")
