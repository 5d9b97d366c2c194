"""Rich-based output helpers for the selrobust CLI."""

from __future__ import annotations

import logging
from typing import Any, Iterable, Mapping, Optional, Sequence

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

logger = logging.getLogger(__name__)

console = Console()


def print_stage_result(stage: str, exit_code: int, output_path: str = "") -> None:
    """Show command completion with status icon."""
    logger.debug("Stage result: stage=%s, exit_code=%d, output_path=%s",
                 stage, exit_code, output_path)
    if exit_code == 0:
        icon = "[green]✓[/green]"
        status = "[green]passed[/green]"
    else:
        icon = "[red]✗[/red]"
        status = f"[red]failed (exit {exit_code})[/red]"
    msg = f"{icon} {stage}: {status}"
    if output_path:
        msg += f" → {output_path}"
    console.print(msg)


def print_sweep_header(cells: int, workers: int, output_dir: str, step_rule: str) -> None:
    """Show sweep start banner."""
    table = Table(show_header=False, box=None)
    table.add_row("[bold]Cells[/bold]", str(cells))
    table.add_row("[bold]Workers[/bold]", str(workers))
    table.add_row("[bold]Output[/bold]", output_dir)
    table.add_row("[bold]PGD step[/bold]", step_rule)
    console.print(Panel(table, title="[bold cyan]Alpha Sweep[/bold cyan]"))


def _fmt(value: Any) -> str:
    if value is None:
        return "[dim]-[/dim]"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def print_metric_table(title: str, rows: Sequence[Mapping[str, Any]],
                       columns: Optional[Iterable[str]] = None) -> None:
    """Render a list of flat dicts as a table."""
    if not rows:
        console.print(f"[dim]{title}: no rows[/dim]")
        return
    columns = list(columns) if columns is not None else list(rows[0])
    table = Table(title=title)
    for col in columns:
        table.add_column(col, style="cyan" if col in ("alpha", "layer", "kind") else None)
    for row in rows:
        table.add_row(*(_fmt(row.get(col)) for col in columns))
    console.print(table)


def print_error(message: str) -> None:
    """Print red error message."""
    logger.debug("Error output: %s", message)
    console.print(f"[bold red]Error:[/bold red] {message}")


def print_success(message: str) -> None:
    """Print green success message."""
    console.print(f"[green]✓[/green] {message}")
