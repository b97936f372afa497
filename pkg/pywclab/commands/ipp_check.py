from typing import Optional, Sequence

import click

from pywclab.commands.common import INT_LIST, experiment, seed_option
from pywclab.wclab.constants import IPP_TOLERANCE
from pywclab.wclab.diffops import ipp_suite


def run_ipp_check(
    ctx: click.Context,
    ns: Optional[Sequence[int]],
    trials: Optional[int],
    seed: Optional[int] = None,
) -> None:
    """
    Check the discrete integration by parts identities on random fields.

    Writes ipp_residuals.csv (identity, N, trial, residual) and a summary with the largest
    residual per identity. Exits with code 2 if a residual exceeds the tolerance.

    Parameters:
        ctx (click.Context): Holds the global options.
        ns (list): Mesh sizes N.
        trials (int): Random trials per identity and mesh.
        seed (int): Root seed, the global one when None.
    """
    with experiment(ctx, "ipp-check", overrides={"n": ns, "trials": trials}, seed=seed) as run:
        run.stage = "identities"
        rows = ipp_suite(run["n"], run["trials"], run.seed, threads=run.threads)
        run.stage = "report"
        run.write_rows(rows, "ipp_residuals", ["identity", "N", "trial", "residual"])
        worst = {}
        for row in rows:
            worst[row["identity"]] = max(worst.get(row["identity"], 0.0), row["residual"])
        run.write_summary({"max_residual": worst, "tolerance": IPP_TOLERANCE})
        failed = sorted(name for name, value in worst.items() if value > IPP_TOLERANCE)
        run.check(not failed, f"IPP residuals above {IPP_TOLERANCE:g} for {failed}.")
        click.echo(f"All identities hold to {max(worst.values()):.3e}.")


@click.command("ipp-check", help="Check the discrete integration by parts identities.")
@click.option("--n", "ns", type=INT_LIST, help="Mesh sizes, e.g. 4,8,16.")
@click.option("--trials", type=click.IntRange(min=1), help="Random trials per identity.")
@seed_option
@click.pass_context
def ipp_check(ctx, ns: Sequence[int], trials: Optional[int], seed: Optional[int]) -> None:
    """
    Check the discrete integration by parts identities.
    """
    run_ipp_check(ctx, ns=ns, trials=trials, seed=seed)
