from typing import Optional, Sequence

import click

from pywclab.commands.common import INT_LIST, experiment
from pywclab.wclab.carleman_elliptic import regularity_sweep
from pywclab.wclab.constants import REGULARITY_SPREAD
from pywclab.wclab.utils import compile_expression


def run_elliptic_check(
    ctx: click.Context, config_path: Optional[str] = None, ns: Optional[Sequence[int]] = None
) -> None:
    """
    H2_h regularity of the Dirichlet problem -Delta_h w + q w = g over a sequence of meshes.

    Writes elliptic_regularity.csv (N, h, ratio, residual) and regularity.dat. Exits with code
    2 when the ratios spread by more than a factor 1.5.

    Parameters:
        ctx (click.Context): Holds the global options.
        config_path (str): Optional config file with the keys n, q and g.
        ns (list): Mesh sizes N; overrides the config.
    """
    with experiment(ctx, "elliptic-check", config_path, {"n": ns}) as run:
        run.stage = "solve"
        rows = regularity_sweep(
            run["n"], q=compile_expression(run["q"]), g=compile_expression(run["g"])
        )
        run.stage = "report"
        run.write_rows(rows, "elliptic_regularity", ["N", "h", "ratio", "residual"])
        run.write_dat([r["h"] for r in rows], [r["ratio"] for r in rows], "regularity")
        ratios = [r["ratio"] for r in rows]
        spread = max(ratios) / min(ratios)
        run.write_summary({"spread": spread, "max_residual": max(r["residual"] for r in rows)})
        run.check(
            spread < REGULARITY_SPREAD,
            f"Regularity ratios spread by {spread:.3g} >= {REGULARITY_SPREAD}.",
        )
        click.echo(f"Regularity ratios spread by {spread:.3g}.")


@click.command("elliptic-check", help="H2 regularity ratios of the discrete elliptic problem.")
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, readable=True),
    help="Config file (key = value lines).",
)
@click.option("--n", "ns", type=INT_LIST, help="Mesh sizes, e.g. 10,20,40,80.")
@click.pass_context
def elliptic_check(ctx, config_path: Optional[str], ns: Optional[Sequence[int]]) -> None:
    """
    H2 regularity ratios of the discrete elliptic problem.
    """
    run_elliptic_check(ctx, config_path=config_path, ns=ns)
