import os
from typing import Optional

import click

from pywclab.commands.common import experiment, node_field, space_time_function
from pywclab.wclab.file_utils import write_time_series
from pywclab.wclab.grid import Mesh
from pywclab.wclab.wavesolve import WaveProblem, energy_array, solve as solve_wave


def run_solve(ctx: click.Context, config_path: Optional[str]) -> None:
    """
    Solve the semi-discrete wave equation with potential and write the trajectory.

    Outputs: snapshots/ (one node-field CSV per kept step and index.json), energy.csv with the
    columns t,E and energy.dat for plotting.

    Parameters:
        ctx (click.Context): Holds the global options.
        config_path (str): Config file with the keys N, T, dt_factor, q, y0, y1, f, f_bdy and
            snapshot_stride. q may be a node-field CSV path.
    """
    with experiment(ctx, "solve", config_path) as run:
        run.stage = "data"
        mesh = Mesh(run["N"])
        problem = WaveProblem.create(
            mesh,
            node_field(run["q"], mesh),
            node_field(run["y0"], mesh),
            node_field(run["y1"], mesh),
            T=run["T"],
            dt_factor=run["dt_factor"],
            f=space_time_function(run["f"], mesh),
            f_bdy=space_time_function(run["f_bdy"], mesh, boundary=True),
        )
        run.stage = "leapfrog"
        sol = solve_wave(problem)
        run.stage = "report"
        energies = energy_array(sol)
        times = sol.y.times
        write_time_series(sol.y, run.path("snapshots"), run["snapshot_stride"])
        run.write_rows(
            [{"t": float(t), "E": float(e)} for t, e in zip(times, energies)], "energy"
        )
        run.write_dat(times, energies, "energy")
        drift = abs(energies[-1] - energies[0]) / max(abs(energies[0]), 1e-300)
        run.write_summary(
            {
                "N": mesh.N,
                "dt": problem.dt,
                "steps": problem.n_steps,
                "energy_initial": float(energies[0]),
                "energy_final": float(energies[-1]),
                "relative_drift": float(drift),
                "snapshots": os.path.join(run.config.out, "snapshots"),
            }
        )
        click.echo(f"Solved {problem.n_steps} steps; relative energy drift {drift:.3e}.")


@click.command("solve", help="Solve the semi-discrete wave equation with potential.")
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, readable=True),
    help="Config file (key = value lines).",
)
@click.pass_context
def solve(ctx, config_path: Optional[str]) -> None:
    """
    Solve the semi-discrete wave equation with potential.
    """
    run_solve(ctx, config_path=config_path)
