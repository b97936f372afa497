import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, List, Mapping, Optional, Sequence

import click
import numpy as np

from pywclab.wclab.carleman_hyperbolic import InadmissibleParameterError
from pywclab.wclab.config import ExperimentConfig
from pywclab.wclab.constants import EXIT_CHECK_FAILED, EXIT_USAGE, SUMMARY_FILE
from pywclab.wclab.file_utils import (
    ensure_output_dir,
    read_node_field,
    write_dat,
    write_json,
    write_table,
)
from pywclab.wclab.grid import Mesh, NodeField, trace_array
from pywclab.wclab.utils import compile_expression

"""
Shared plumbing of the subcommands: config resolution, output writing and exit codes.
"""


class ListParamType(click.ParamType):
    """Comma-separated list such as 10,20,40."""

    name = "list"

    def __init__(self, kind: type):
        self.kind = kind

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        try:
            items = tuple(self.kind(v) for v in str(value).split(",") if v.strip())
        except ValueError:
            items = ()
        if not items:
            self.fail(f"'{value}' is not a list of {self.kind.__name__} values.", param, ctx)
        return items


INT_LIST = ListParamType(int)
FLOAT_LIST = ListParamType(float)

seed_option = click.option(
    "--seed",
    type=click.IntRange(0, 2**64 - 1),
    default=None,
    help="Root seed of the random streams; overrides the global --seed.",
)


class CheckFailedError(Exception):
    """An acceptance check of a command did not pass."""


@dataclass
class Run:
    """
    One command run: its resolved config, the global options and the current stage.

    Parameters:
        config (ExperimentConfig): Resolved configuration.
        threads (int): Worker threads for independent samples.
        fmt (str): Table format, "csv" or "json".
        stage (str): Name of the step in progress, reported on failure.
    """

    config: ExperimentConfig
    threads: int = 1
    fmt: str = "csv"
    stage: str = "setup"

    def __getitem__(self, key: str) -> object:
        return self.config[key]

    @property
    def seed(self) -> int:
        return self.config.seed

    def path(self, name: str) -> str:
        return os.path.join(self.config.out, name)

    def write_rows(
        self, rows: Sequence[Mapping[str, object]], name: str, columns: Optional[List[str]] = None
    ) -> str:
        if self.fmt == "json":
            return write_json({"rows": list(rows)}, self.path(f"{name}.json"))
        return write_table(rows, self.path(f"{name}.csv"), columns)

    def write_summary(self, summary: Mapping[str, object], name: str = SUMMARY_FILE) -> str:
        return write_json(summary, self.path(name))

    def write_dat(self, x: Iterable[float], y: Iterable[float], name: str) -> str:
        return write_dat(x, y, self.path(f"{name}.dat"))

    def check(self, passed: bool, message: str) -> None:
        """
        Raises:
            CheckFailedError: If passed is False.
        """
        if not passed:
            raise CheckFailedError(message)


@contextmanager
def experiment(
    ctx: click.Context,
    command: str,
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, object]] = None,
    seed: Optional[int] = None,
) -> Iterator[Run]:
    """
    Resolve the config of a command, write its manifest and map failures to exit codes: 2 for a
    failed check or an inadmissible parameter, 1 for anything else.
    """
    obj = ctx.obj or {}
    run = None
    try:
        config = ExperimentConfig.load(
            command,
            config_path,
            overrides,
            seed=obj.get("seed", 0) if seed is None else seed,
            out=obj.get("out", "."),
        )
        ensure_output_dir(config.out)
        config.write_manifest()
        run = Run(config, threads=obj.get("threads", 1), fmt=obj.get("fmt", "csv"))
        yield run

    except (CheckFailedError, InadmissibleParameterError) as e:
        click.secho(f"Error: {str(e)}", fg="red", err=True)
        if run is not None:
            run.write_summary(
                {"command": command, "status": "failed", "stage": run.stage, "error": str(e)}
            )
        sys.exit(EXIT_CHECK_FAILED)

    except Exception as e:
        stage = "config" if run is None else run.stage
        logging.debug(f"{command} failed in stage '{stage}'", exc_info=True)
        click.secho(f"Error: {command} [{stage}]: {str(e)}", fg="red", err=True)
        sys.exit(EXIT_USAGE)

    finally:
        logging.info(f"{command} finished.")


def node_field(source: str, mesh: Mesh) -> NodeField:
    """
    A node field from a numpy expression in x1, x2, or from a node-field CSV path.

    Raises:
        ValueError: If the expression is invalid or the file lives on another mesh.
    """
    if source.strip().endswith(".csv"):
        f = read_node_field(source.strip())
        mesh.check_same(f.mesh)
        return f
    return NodeField.from_function(mesh, compile_expression(source))


def space_time_function(
    source: str, mesh: Mesh, boundary: bool = False
) -> Optional[Callable[[float], np.ndarray]]:
    """
    t -> node array of an expression in x1, x2, t, or its boundary trace when boundary=True.
    None for the expression "0".
    """
    if source.strip() == "0":
        return None
    fn = compile_expression(source, ("x1", "x2", "t"))
    x1, x2 = mesh.nodes()

    def evaluate(t: float) -> np.ndarray:
        values = np.broadcast_to(np.asarray(fn(x1, x2, t), dtype=float), mesh.shape)
        return trace_array(values) if boundary else values

    return evaluate
