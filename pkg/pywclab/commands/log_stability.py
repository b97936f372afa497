from typing import Optional

import click

from pywclab.commands.common import experiment, node_field
from pywclab.wclab.carleman_elliptic import build_elliptic_weight
from pywclab.wclab.fbi import log_stability_experiment, measurement_sweep, symmetric_wave_solution
from pywclab.wclab.grid import Mesh


def run_log_stability(ctx: click.Context, config_path: Optional[str]) -> None:
    """
    Discrete logarithmic stability experiment: the wave solution zeta_h on [-T, T] from the
    configured data, its FBI transform, the elliptic estimate on the cylinder and the
    three-case choice of lambda.

    Writes log_stability.json (constants, norms, selection, bounds, elliptic terms and ratios),
    measurement_sweep.csv (the bound as the measurement norm grows) and measurement_sweep.dat.

    Parameters:
        ctx (click.Context): Holds the global options.
        config_path (str): Config file; see COMMAND_DEFAULTS["log-stability"] for the keys.
    """
    with experiment(ctx, "log-stability", config_path) as run:
        run.stage = "wave solution"
        mesh = Mesh(run["N"])
        q = node_field(run["q"], mesh)
        zeta = symmetric_wave_solution(
            mesh,
            run["T"],
            q,
            node_field(run["y0"], mesh).with_zero_boundary(),
            node_field(run["y1"], mesh).with_zero_boundary(),
            dt_factor=run["dt_factor"],
        )
        run.stage = "elliptic weight"
        weight = build_elliptic_weight(mesh, interval=run["gamma0"], R=run["R"], R0=run["R0"])
        run.stage = "fbi pipeline"
        report = log_stability_experiment(
            zeta,
            weight,
            n=run["n_kernel"],
            alpha=run["alpha"],
            q=q,
            eps_tau_h=run["eps_tau_h"],
            s_step=run["s_step"],
        )
        run.stage = "report"
        sweep = measurement_sweep(report, mesh.h, run["factors"])
        run.write_summary(report, "log_stability.json")
        run.write_rows(sweep, "measurement_sweep")
        bounds = [r["log_bound"] for r in sweep]
        run.write_dat([r["M"] for r in sweep], bounds, "measurement_sweep")
        selection = report["selection"]
        click.echo(
            f"lambda case {selection['case']}: lambda={selection['lambda']:.4g}, "
            f"lhs/log_bound={report['ratios']['lhs_over_log_bound']:.4g}"
        )


@click.command("log-stability", help="Discrete logarithmic stability through the FBI transform.")
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, readable=True),
    help="Config file (key = value lines).",
)
@click.pass_context
def log_stability(ctx, config_path: Optional[str]) -> None:
    """
    Discrete logarithmic stability through the FBI transform.
    """
    run_log_stability(ctx, config_path=config_path)
