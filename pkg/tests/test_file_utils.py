from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from pywclab.wclab.file_utils import (
    check_path_exists_and_readable,
    ensure_output_dir,
    read_json,
    read_node_field,
    read_table,
    read_time_series,
    write_dat,
    write_json,
    write_node_field,
    write_table,
    write_time_series,
)
from pywclab.wclab.grid import Mesh, NodeField
from pywclab.wclab.wavesolve import TimeSeries, sine_mode

TESTS_DIR = Path(__file__).parent


def test_read_node_field():
    """
    Read a node field and its sidecar from the test data.
    :return: None
    """
    f = read_node_field(str(TESTS_DIR / "testdata/fields/potential_n2.csv"))
    assert f.mesh.N == 2
    np.testing.assert_allclose(f.interior, [[2.5, 3.5], [3.5, 4.5]])
    assert f.is_dirichlet_zero()


def test_node_field_keeps_full_precision(tmp_path):
    """
    Values written and read back are bit-identical.
    :return: None
    """
    f = sine_mode(Mesh(7), 2, 3)
    path = write_node_field(f, str(tmp_path / "mode.csv"))
    assert read_json(f"{path}.json")["dirichlet_zero"] is True
    np.testing.assert_array_equal(read_node_field(path).values, f.values)


def test_incomplete_node_field(tmp_path):
    """
    A CSV that misses a node is refused.
    :return: None
    """
    path = write_node_field(NodeField.zeros(Mesh(2)), str(tmp_path / "zero.csv"))
    frame = pd.read_csv(path)
    frame.iloc[:-1].to_csv(path, index=False)
    with pytest.raises(ValueError):
        read_node_field(path)


def test_time_series_directory(tmp_path):
    """
    Snapshots are listed in index.json; only full series can be read back.
    :return: None
    """
    mesh = Mesh(3)
    values = np.arange(3.0)[:, None, None] * sine_mode(mesh).values[None]
    series = TimeSeries(mesh, 0.0, 0.25, values)
    directory = write_time_series(series, str(tmp_path / "full"))
    index = read_json(str(Path(directory) / "index.json"))
    assert [entry["t"] for entry in index["snapshots"]] == [0.0, 0.25, 0.5]
    restored = read_time_series(directory)
    assert restored.dt == 0.25
    np.testing.assert_array_equal(restored.values, series.values)

    sparse_dir = write_time_series(series, str(tmp_path / "sparse"), stride=2)
    assert len(read_json(str(Path(sparse_dir) / "index.json"))["snapshots"]) == 2
    with pytest.raises(ValueError):
        read_time_series(sparse_dir)
    with pytest.raises(ValueError):
        write_time_series(series, str(tmp_path / "bad"), stride=0)


def test_tables_and_reports(tmp_path):
    """
    CSV tables keep their column order; JSON reports accept numpy values.
    :return: None
    """
    rows = [{"N": 4, "residual": 1e-16}, {"N": 8, "residual": 2.5e-15}]
    path = write_table(rows, str(tmp_path / "out" / "rows.csv"), ["N", "residual"])
    frame = read_table(path)
    assert list(frame.columns) == ["N", "residual"]
    assert frame["residual"].tolist() == [1e-16, 2.5e-15]

    report = write_json(
        {"rate": np.float64(1.5), "ns": np.array([4, 8]), 3: (1, 2)}, str(tmp_path / "r.json")
    )
    assert read_json(report) == {"3": [1, 2], "ns": [4, 8], "rate": 1.5}

    dat = write_dat([1, 2], [0.5, 0.25], str(tmp_path / "c.dat"))
    np.testing.assert_allclose(np.loadtxt(dat), [[1.0, 0.5], [2.0, 0.25]])


def test_path_checks(tmp_path):
    """
    Missing inputs and outputs that are files are reported.
    :return: None
    """
    with pytest.raises(FileNotFoundError):
        check_path_exists_and_readable(str(tmp_path / "missing.csv"))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(NotADirectoryError):
        ensure_output_dir(str(blocker))
    assert ensure_output_dir(str(tmp_path / "a" / "b")) == str(tmp_path / "a" / "b")
