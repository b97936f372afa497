import math
from typing import Optional, Sequence

import click

from pywclab.commands.common import FLOAT_LIST, experiment
from pywclab.wclab.constants import CLOSED_FORM_TOLERANCE, FOURIER_TOLERANCE
from pywclab.wclab.fbi import (
    FbiKernel,
    closed_form_error,
    fourier_identity_error,
    kernel_decay_check,
    standing_wave_identity_constant,
)


def run_fbi_check(
    ctx: click.Context,
    config_path: Optional[str] = None,
    n_kernel: Optional[int] = None,
    lambdas: Optional[Sequence[float]] = None,
) -> None:
    """
    Check the FBI kernel of order n for every lambda: fitted growth and decay bounds with their
    largest violation, the Fourier identity, for n = 1 the closed form, and the
    approximate-identity constant at lambda and 2 lambda for a standing wave on [-T_log, T_log].

    Writes fbi_kernel.csv, one row per lambda, and a JSON report. Exits with code 2 when a
    violation is positive or an error exceeds its tolerance.

    Parameters:
        ctx (click.Context): Holds the global options.
        config_path (str): Optional config file with the keys n_kernel and lambda.
        n_kernel (int): Kernel order n >= 1.
        lambdas (list): Values of lambda >= 1.
    """
    overrides = {"n_kernel": n_kernel, "lambda": lambdas}
    with experiment(ctx, "fbi-check", config_path, overrides) as run:
        rows, failures = [], []
        for lam in run["lambda"]:
            run.stage = f"kernel lambda={lam:g}"
            kernel = FbiKernel(n=run["n_kernel"], lam=lam)
            row = {"n": kernel.n, "lambda": lam, "gamma": kernel.gamma}
            row.update(kernel_decay_check(kernel))
            row["fourier_error"] = fourier_identity_error(kernel)
            row["closed_form_error"] = closed_form_error(kernel) if kernel.n == 1 else math.nan
            run.stage = f"approximate identity lambda={lam:g}"
            row["approx_identity_C"] = standing_wave_identity_constant(kernel)
            row["approx_identity_C_doubled"] = standing_wave_identity_constant(
                kernel.with_lambda(2.0 * lam)
            )
            row["approx_identity_ratio"] = (
                row["approx_identity_C_doubled"] / row["approx_identity_C"]
            )
            if row["violation"] > 0.0:
                failures.append(f"decay bound violated by {row['violation']:.3g}, lambda={lam:g}")
            if row["fourier_error"] > FOURIER_TOLERANCE:
                failures.append(f"Fourier error {row['fourier_error']:.3g} at lambda={lam:g}")
            if row["closed_form_error"] > CLOSED_FORM_TOLERANCE:
                failures.append(f"closed form error {row['closed_form_error']:.3g}")
            rows.append(row)
        run.stage = "report"
        run.write_rows(rows, "fbi_kernel")
        constants = {str(r["lambda"]): {k: r[k] for k in ("C0", "c0", "c1", "c2")} for r in rows}
        run.write_summary(
            {
                "constants": constants,
                "terms": {
                    str(r["lambda"]): {
                        "fourier_error": r["fourier_error"],
                        "closed_form_error": r["closed_form_error"],
                    }
                    for r in rows
                },
                "ratios": {
                    str(r["lambda"]): r["fourier_error"] / FOURIER_TOLERANCE for r in rows
                },
                "violations": {str(r["lambda"]): r["violation"] for r in rows},
                "approximate_identity": {
                    str(r["lambda"]): {
                        "C": r["approx_identity_C"],
                        "C_doubled": r["approx_identity_C_doubled"],
                        "ratio": r["approx_identity_ratio"],
                    }
                    for r in rows
                },
            }
        )
        run.check(not failures, "; ".join(failures))
        click.echo(f"FBI kernel of order {run['n_kernel']} checked for {len(rows)} lambdas.")


@click.command("fbi-check", help="Check the FBI kernel bounds and Fourier identity.")
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, readable=True),
    help="Config file (key = value lines).",
)
@click.option("--n-kernel", type=click.IntRange(min=1), help="Kernel order n.")
@click.option("--lambda", "lambdas", type=FLOAT_LIST, help="Values of lambda, e.g. 1,4,16.")
@click.pass_context
def fbi_check(
    ctx, config_path: Optional[str], n_kernel: Optional[int], lambdas: Optional[Sequence[float]]
) -> None:
    """
    Check the FBI kernel bounds and Fourier identity.
    """
    run_fbi_check(ctx, config_path=config_path, n_kernel=n_kernel, lambdas=lambdas)
