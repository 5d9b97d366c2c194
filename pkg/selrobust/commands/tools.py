"""Tool commands: init."""
import logging
from pathlib import Path

import click
import yaml

logger = logging.getLogger(__name__)


@click.command()
@click.option("--output", "-o", default=".selrobust.yaml", show_default=True, help="Config file to write")
@click.option("--preset", "-p", type=click.Choice(["desk", "extended"]), default="desk", show_default=True,
              help="desk: PGD step = 0.1 * epsilon; extended: fixed PGD step 0.0001 plus PGD-training intensities")
@click.option("--force", is_flag=True, help="Overwrite an existing file")
@click.pass_context
def init(ctx, output, preset, force):
    """Write an experiment config template."""
    from selrobust.config import config_template
    from selrobust.output import print_error, print_success

    logger.debug("Init config template: output=%s, preset=%s", output, preset)
    out_path = Path(output)
    if out_path.exists() and not force:
        print_error(f"{out_path} already exists (use --force to overwrite)")
        raise SystemExit(1)

    template = config_template(preset)
    template.pop("verbose", None)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(yaml.safe_dump(template, sort_keys=False), encoding="utf-8")
    logger.debug("Config template written to %s", out_path)

    print_success(f"Config template created: {out_path} (preset: {preset})")
