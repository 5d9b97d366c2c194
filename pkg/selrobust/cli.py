"""selrobust CLI entry point."""
import logging
import sys

import click

from selrobust import __version__
from selrobust.config import load_selrobust_config
from selrobust.errors import ConfigError

logger = logging.getLogger(__name__)


@click.group()
@click.version_option(version=__version__, prog_name="selrobust")
@click.option("--verbose", "-v", is_flag=True, default=None, help="Enable verbose output")
@click.option("--config", "config_file", type=click.Path(), default=None,
              help="YAML config file (overrides user and project config)")
@click.pass_context
def cli(ctx, verbose, config_file):
    """selrobust: class selectivity vs. robustness experiments."""
    ctx.ensure_object(dict)

    # Click sets is_flag options to None when not provided (due to default=None).
    cli_overrides = {}
    if verbose is not None:
        cli_overrides["verbose"] = verbose

    try:
        config = load_selrobust_config(config_file=config_file, cli_overrides=cli_overrides)
    except ConfigError as exc:
        from selrobust.output import print_error

        print_error(str(exc))
        sys.exit(1)
    ctx.obj.update(config)

    if config.get("verbose"):
        logging.basicConfig(
            level=logging.DEBUG,
            format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        )
        logger.debug("Verbose logging enabled")
    else:
        logging.basicConfig(
            level=logging.WARNING,
            format="%(levelname)s: %(message)s",
        )


# Register stage commands
from selrobust.commands.stages import gen_data, train, attack, corrupt, analyze  # noqa: E402
cli.add_command(gen_data)
cli.add_command(train)
cli.add_command(attack)
cli.add_command(corrupt)
cli.add_command(analyze)

# Register pipeline commands
from selrobust.commands.pipeline import sweep, report, status  # noqa: E402
cli.add_command(sweep)
cli.add_command(report)
cli.add_command(status)

# Register tool commands
from selrobust.commands.tools import init  # noqa: E402
cli.add_command(init)


def main():
    cli()


if __name__ == "__main__":
    main()
