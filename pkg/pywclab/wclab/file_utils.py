import json
import logging
import os
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np
import pandas as pd

from pywclab.wclab.grid import Mesh, NodeField
from pywclab.wclab.wavesolve import TimeSeries

"""
Utility functions for file handling: path checks, tables, reports and field I/O.
"""

FLOAT_FORMAT = "%.17g"
INDEX_FILE = "index.json"


def check_path_exists_and_readable(path: str) -> str:
    """
    Check if a file or directory exists and is readable.

    Parameters:
        path (str): Path to the file or directory (absolute or relative).

    Returns:
        str: The original path if it exists and is readable.

    Raises:
        FileNotFoundError: If the path does not exist.
        PermissionError: If the path exists but is not readable.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"File or directory '{path}' not found.")
    if not os.access(path, os.R_OK):
        raise PermissionError(f"File or directory '{path}' is not readable.")
    return path


def ensure_output_dir(path: str) -> str:
    """
    Create the output directory if needed.

    Raises:
        NotADirectoryError: If the path exists and is not a directory.
        PermissionError: If the directory is not writable.
    """
    if os.path.exists(path) and not os.path.isdir(path):
        raise NotADirectoryError(f"'{path}' is not a directory.")
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"Directory '{path}' is not writable.")
    return path


def write_table(rows: Sequence[Mapping[str, object]], path: str, columns: List[str] = None) -> str:
    """Write rows as CSV with every float at full precision. Returns the path."""
    ensure_output_dir(os.path.dirname(path) or ".")
    frame = pd.DataFrame(list(rows), columns=columns)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logging.info(f"Wrote {len(frame)} rows to '{path}'")
    return path


def read_table(path: str) -> pd.DataFrame:
    return pd.read_csv(check_path_exists_and_readable(path))


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(report: Mapping[str, object], path: str) -> str:
    """Write a report as sorted, indented JSON. numpy scalars and arrays become plain values."""
    ensure_output_dir(os.path.dirname(path) or ".")
    with open(path, "w") as handle:
        json.dump(_plain(report), handle, indent=2, sort_keys=True)
        handle.write("\n")
    logging.info(f"Wrote report '{path}'")
    return path


def read_json(path: str) -> Dict[str, object]:
    with open(check_path_exists_and_readable(path)) as handle:
        return json.load(handle)


def write_dat(x: Iterable[float], y: Iterable[float], path: str) -> str:
    """Two whitespace-separated columns, one point per line."""
    ensure_output_dir(os.path.dirname(path) or ".")
    data = np.column_stack([np.asarray(list(x), dtype=float), np.asarray(list(y), dtype=float)])
    np.savetxt(path, data, fmt=FLOAT_FORMAT, delimiter=" ")
    return path


def write_node_field(f: NodeField, path: str) -> str:
    """
    Write a field as CSV "i,j,value" over the closure of the grid, with the JSON sidecar
    {N, h, dirichlet_zero} at path + ".json".
    """
    i, j = np.meshgrid(np.arange(f.mesh.N + 2), np.arange(f.mesh.N + 2), indexing="ij")
    frame = pd.DataFrame({"i": i.ravel(), "j": j.ravel(), "value": f.values.ravel()})
    ensure_output_dir(os.path.dirname(path) or ".")
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    write_json(
        {"N": f.mesh.N, "h": f.mesh.h, "dirichlet_zero": bool(f.is_dirichlet_zero())},
        f"{path}.json",
    )
    return path


def read_node_field(path: str) -> NodeField:
    """
    Read a field written by write_node_field.

    Raises:
        ValueError: If the indices do not cover the grid of the sidecar exactly once.
    """
    meta = read_json(f"{path}.json")
    mesh = Mesh(int(meta["N"]))
    frame = read_table(path)
    if list(frame.columns) != ["i", "j", "value"]:
        raise ValueError(f"'{path}' must have the columns i,j,value, got {list(frame.columns)}.")
    if len(frame) != (mesh.N + 2) ** 2:
        raise ValueError(f"'{path}' has {len(frame)} rows, expected {(mesh.N + 2) ** 2}.")
    values = np.full(mesh.shape, np.nan)
    values[frame["i"].to_numpy(), frame["j"].to_numpy()] = frame["value"].to_numpy(dtype=float)
    if np.isnan(values).any():
        raise ValueError(f"'{path}' does not cover every node of the N={mesh.N} grid.")
    return NodeField(mesh, values)


def write_time_series(series: TimeSeries, directory: str, stride: int = 1) -> str:
    """One node-field CSV per kept snapshot plus index.json listing the times and files."""
    if stride < 1:
        raise ValueError(f"The snapshot stride must be >= 1, got {stride}.")
    ensure_output_dir(directory)
    entries = []
    for n in range(0, len(series), stride):
        name = f"snapshot_{n:06d}.csv"
        write_node_field(series.snapshot(n), os.path.join(directory, name))
        entries.append({"index": n, "t": float(series.times[n]), "file": name})
    write_json(
        {
            "N": series.mesh.N,
            "t0": series.t0,
            "dt": series.dt,
            "stride": stride,
            "snapshots": entries,
        },
        os.path.join(directory, INDEX_FILE),
    )
    logging.info(f"Wrote {len(entries)} snapshots to '{directory}'")
    return directory


def read_time_series(directory: str) -> TimeSeries:
    """
    Read a series written with stride 1.

    Raises:
        ValueError: If snapshots are missing.
    """
    if not os.path.isdir(directory):
        raise NotADirectoryError(f"'{directory}' is not a directory.")
    index = read_json(os.path.join(directory, INDEX_FILE))
    if index["stride"] != 1:
        raise ValueError(f"'{directory}' keeps every {index['stride']}-th snapshot only.")
    fields = [read_node_field(os.path.join(directory, e["file"])) for e in index["snapshots"]]
    values = np.stack([f.values for f in fields])
    return TimeSeries(fields[0].mesh, float(index["t0"]), float(index["dt"]), values)
