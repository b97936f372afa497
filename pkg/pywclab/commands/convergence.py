import math
from typing import Optional

import click

from pywclab.commands.common import experiment
from pywclab.wclab.constants import CONVERGENCE_MIN_RATE
from pywclab.wclab.inverse import convergence_study, error_monotone
from pywclab.wclab.utils import compile_expression


def run_convergence(ctx: click.Context, config_path: Optional[str]) -> None:
    """
    Mesh-refinement study of the inverse problem: the L2 error of the reconstructed (or, in
    exact mode, restricted) potential and the gap to the exact measurement, per N.

    Writes convergence.csv (N, h, potential_error, measurement_gap, iterations, rate) and
    convergence.dat (h against the error). In exact mode the observed rate must reach 0.9; in
    reconstruct mode the errors must not increase beyond a 10% slack. Failures exit with code 2.

    Parameters:
        ctx (click.Context): Holds the global options.
        config_path (str): Config file; see COMMAND_DEFAULTS["convergence"] for the keys.
    """
    with experiment(ctx, "convergence", config_path) as run:
        run.stage = run["mode"]
        rows = convergence_study(
            run["n"],
            mode=run["mode"],
            q_true=compile_expression(run["q_true"]),
            T=run["T"],
            dt_factor=run["dt_factor"],
            method=run["method"],
            max_iterations=run["max_iterations"],
            tolerance=run["tolerance"],
            eps_reg=run["eps_reg"],
            threads=run.threads,
        )
        run.stage = "report"
        columns = ["N", "h", "potential_error", "measurement_gap", "iterations", "rate"]
        run.write_rows(rows, "convergence", columns)
        run.write_dat([r["h"] for r in rows], [r["potential_error"] for r in rows], "convergence")
        rates = [r["rate"] for r in rows[1:] if math.isfinite(r["rate"])]
        monotone = error_monotone(rows)
        run.write_summary({"mode": run["mode"], "rates": rates, "monotone": monotone})
        resolved = max(r["potential_error"] for r in rows) > 1e-12
        if run["mode"] == "exact" and rates and resolved:
            run.check(
                min(rates) >= CONVERGENCE_MIN_RATE,
                f"Observed rate {min(rates):.3g} below {CONVERGENCE_MIN_RATE}.",
            )
        run.check(monotone or not resolved, "The potential error increases along the refinement.")
        errors = ", ".join(f"{r['potential_error']:.3e}" for r in rows)
        click.echo(f"Potential errors: {errors}")


@click.command("convergence", help="Mesh-refinement convergence study of the inverse problem.")
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, readable=True),
    help="Config file (key = value lines).",
)
@click.pass_context
def convergence(ctx, config_path: Optional[str]) -> None:
    """
    Mesh-refinement convergence study of the inverse problem.
    """
    run_convergence(ctx, config_path=config_path)
