from typing import Optional

import click

from pywclab.commands.common import experiment, node_field
from pywclab.wclab.carleman_elliptic import elliptic_carleman_sweep
from pywclab.wclab.grid import Mesh


def run_elliptic_carleman(ctx: click.Context, config_path: Optional[str]) -> None:
    """
    Both sides of the elliptic Carleman estimate on the cylinder (-S, S) x Omega_h for the
    cylinder bump, one row per mesh size, in elliptic_carleman.csv.

    Parameters:
        ctx (click.Context): Holds the global options.
        config_path (str): Config file with the keys n, tau_h, mu, gamma0, R, R0,
            s_step_factor and q.
    """
    with experiment(ctx, "elliptic-carleman", config_path) as run:
        rows = []
        for n in run["n"]:
            run.stage = f"weight N={n}"
            mesh = Mesh(n)
            q = None if run["q"].strip() == "0" else node_field(run["q"], mesh)
            rows.extend(
                elliptic_carleman_sweep(
                    [n],
                    tau_h=run["tau_h"],
                    mu=run["mu"],
                    interval=run["gamma0"],
                    R=run["R"],
                    R0=run["R0"],
                    s_step_factor=run["s_step_factor"],
                    q=q,
                )
            )
        run.stage = "report"
        run.write_rows(rows, "elliptic_carleman")
        run.write_dat([r["N"] for r in rows], [r["ratio"] for r in rows], "elliptic_ratio")
        run.write_summary({"C_emp_max": {str(r["N"]): r["ratio"] for r in rows}})
        click.echo(f"Elliptic Carleman ratios: {[round(r['ratio'], 6) for r in rows]}")


@click.command("elliptic-carleman", help="Empirical constant of the elliptic Carleman estimate.")
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, readable=True),
    help="Config file (key = value lines).",
)
@click.pass_context
def elliptic_carleman(ctx, config_path: Optional[str]) -> None:
    """
    Empirical constant of the elliptic Carleman estimate.
    """
    run_elliptic_carleman(ctx, config_path=config_path)
