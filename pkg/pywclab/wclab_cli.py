import logging
from pathlib import Path

import click

import pywclab.__init__ as __init__
from pywclab.commands.carleman_sweep import carleman_sweep
from pywclab.commands.convergence import convergence
from pywclab.commands.elliptic_carleman import elliptic_carleman
from pywclab.commands.elliptic_check import elliptic_check
from pywclab.commands.fbi_check import fbi_check
from pywclab.commands.ipp_check import ipp_check
from pywclab.commands.log_stability import log_stability
from pywclab.commands.reconstruct import reconstruct
from pywclab.commands.solve import solve
from pywclab.commands.stability_sweep import stability_sweep
from pywclab.wclab.constants import EXIT_USAGE, OUTPUT_FORMATS

CONTEXT_SETTINGS = dict(help_option_names=["-h", "--help"])


LOG_LEVELS = ["debug", "info", "warn"]
LOG_LEVELS_TO_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warn": logging.WARN,
}
LOG_FORMAT = "%(asctime)s [%(funcName)s] - %(message)s"


class ExperimentGroup(click.Group):
    """Click group whose usage errors exit with code 1."""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise


@click.group(cls=ExperimentGroup, context_settings=CONTEXT_SETTINGS)
@click.version_option(
    version=__init__.__version__,
    package_name="pywclab",
    message="%(package)s %(version)s",
)
@click.option(
    "-v",
    "--log-level",
    type=click.Choice(LOG_LEVELS, False),
    default="info",
    help="Set the logging level.",
)
@click.option(
    "--log-file",
    type=click.Path(writable=True, path_type=Path),
    required=False,
    help="Write log to this file.",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    default=".",
    show_default=True,
    help="Output directory of the run.",
)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="Worker threads for independent samples.",
)
@click.option(
    "--format",
    "fmt",
    type=click.Choice(OUTPUT_FORMATS),
    default="csv",
    show_default=True,
    help="Format of the tables.",
)
@click.pass_context
def cli(ctx, log_level: str, log_file: Path, out: str, seed: int, threads: int, fmt: str):
    """
    Command-line interface of the pywclab package.
    """

    logging.basicConfig(
        format=LOG_FORMAT,
        level=LOG_LEVELS_TO_LEVELS[log_level.lower()],
    )
    logging.captureWarnings(True)

    if log_file:
        if not log_file.parent.exists():
            log_file.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(log_file)
        handler.setLevel(LOG_LEVELS_TO_LEVELS[log_level.lower()])
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)

    ctx.obj = {"out": out, "seed": seed, "threads": threads, "fmt": fmt}


# Add subcommands to the CLI
cli.add_command(solve)
cli.add_command(ipp_check)
cli.add_command(carleman_sweep)
cli.add_command(elliptic_check)
cli.add_command(elliptic_carleman)
cli.add_command(fbi_check)
cli.add_command(log_stability)
cli.add_command(stability_sweep)
cli.add_command(reconstruct)
cli.add_command(convergence)


def main():
    """
    Main function to run the CLI
    """
    try:
        cli()
    except SystemExit as e:
        if e.code != 0:
            raise


if __name__ == "__main__":
    main()
