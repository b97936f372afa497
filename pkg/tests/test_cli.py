from pathlib import Path

from click.testing import CliRunner

from pywclab import __version__
from pywclab.wclab.constants import EXIT_CHECK_FAILED, EXIT_USAGE
from pywclab.wclab.file_utils import read_json, read_table
from pywclab.wclab_cli import cli

TESTS_DIR = Path(__file__).parent


def test_version():
    """
    --version prints the package name and version.
    :return: None
    """
    result = CliRunner().invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert result.output.strip() == f"pywclab {__version__}"


def test_usage_errors(tmp_path):
    """
    Unknown options and missing config files exit with the usage code.
    :return: None
    """
    runner = CliRunner()
    assert runner.invoke(cli, ["--no-such-option"]).exit_code == EXIT_USAGE
    assert runner.invoke(cli, ["ipp-check", "--bogus"]).exit_code == EXIT_USAGE
    missing = str(tmp_path / "missing.cfg")
    assert runner.invoke(cli, ["solve", "--config", missing]).exit_code == EXIT_USAGE


def test_ipp_check_is_reproducible(tmp_path):
    """
    Two runs with the same seed write identical tables and a manifest.
    :return: None
    """
    runner = CliRunner()
    tables = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = runner.invoke(
            cli, ["--out", str(out), "ipp-check", "--n", "3", "--trials", "2", "--seed", "1"]
        )
        assert result.exit_code == 0, result.output
        tables.append((out / "ipp_residuals.csv").read_bytes())
        manifest = read_json(str(out / "manifest.json"))
        assert manifest["config"] == {"n": [3], "trials": 2}
        assert manifest["seed"] == 1
    assert tables[0] == tables[1]
    frame = read_table(str(tmp_path / "first" / "ipp_residuals.csv"))
    assert list(frame.columns) == ["identity", "N", "trial", "residual"]


def test_json_tables(tmp_path):
    """
    --format json writes the rows as a JSON document.
    :return: None
    """
    result = CliRunner().invoke(
        cli, ["--out", str(tmp_path), "--format", "json", "ipp-check", "--n", "3", "--trials", "1"]
    )
    assert result.exit_code == 0, result.output
    rows = read_json(str(tmp_path / "ipp_residuals.json"))["rows"]
    assert {row["N"] for row in rows} == {3}


def test_inadmissible_parameter(tmp_path):
    """
    tau h above the admissible bound exits with code 2 and a failed summary.
    :return: None
    """
    result = CliRunner().invoke(
        cli, ["--out", str(tmp_path), "carleman-sweep", "--n", "3", "--tauh", "0.5"]
    )
    assert result.exit_code == EXIT_CHECK_FAILED
    summary = read_json(str(tmp_path / "summary.json"))
    assert summary["status"] == "failed"
    assert summary["command"] == "carleman-sweep"
    assert "inadmissible-parameter" in summary["error"]


def test_solve_from_config(tmp_path):
    """
    solve writes the snapshots, the energy table and the summary.
    :return: None
    """
    config = TESTS_DIR / "testdata/configs/wave.cfg"
    result = CliRunner().invoke(cli, ["--out", str(tmp_path), "solve", "--config", str(config)])
    assert result.exit_code == 0, result.output
    for name in ("manifest.json", "summary.json", "energy.csv", "energy.dat"):
        assert (tmp_path / name).is_file()
    index = read_json(str(tmp_path / "snapshots" / "index.json"))
    summary = read_json(str(tmp_path / "summary.json"))
    assert index["N"] == 6
    assert len(index["snapshots"]) == summary["steps"] + 1
    assert summary["relative_drift"] < 5e-2
    assert read_json(str(tmp_path / "manifest.json"))["config"]["N"] == 6


def test_stability_sweep_reports_energy_constant(tmp_path):
    """
    stability-sweep reports the fitted energy-bound constant per N and its spread.
    :return: None
    """
    config = tmp_path / "sweep.cfg"
    config.write_text("n = 4,8\nsamples = 1\nfamily = trig\n")
    out = tmp_path / "out"
    result = CliRunner().invoke(
        cli, ["--out", str(out), "stability-sweep", "--config", str(config), "--seed", "2"]
    )
    assert result.exit_code == 0, result.output
    summary = read_json(str(out / "summary.json"))
    assert set(summary["energy_constant"]) == {"4", "8"}
    assert all(0.0 < c < float("inf") for c in summary["energy_constant"].values())
    assert summary["energy_constant_spread"] >= 1.0
    frame = read_table(str(out / "stability_records.csv"))
    assert (frame["energy_constant"] > 0.0).all()


def test_fbi_check_reports_approximate_identity(tmp_path):
    """
    fbi-check reports the approximate-identity constant at lambda and 2 lambda; it decreases
    under doubling for the order-1 kernel.
    :return: None
    """
    result = CliRunner().invoke(
        cli, ["--out", str(tmp_path), "fbi-check", "--n-kernel", "1", "--lambda", "4"]
    )
    assert result.exit_code == 0, result.output
    entry = read_json(str(tmp_path / "summary.json"))["approximate_identity"]["4.0"]
    assert 0.0 < entry["C_doubled"] < entry["C"]
    assert entry["ratio"] == entry["C_doubled"] / entry["C"]
    frame = read_table(str(tmp_path / "fbi_kernel.csv"))
    assert "approx_identity_C" in frame.columns
