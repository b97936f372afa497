from pathlib import Path

import pytest

from pywclab import __version__
from pywclab.wclab.config import ExperimentConfig, parse_value, read_config_file
from pywclab.wclab.file_utils import read_json


@pytest.mark.parametrize(
    "raw,default,expected",
    [
        ("20", 16, 20),
        ("0.5", 1.0, 0.5),
        ("lbfgs", "descent", "lbfgs"),
        ("4, 8,16", (4,), (4, 8, 16)),
        ("0.1", (0.2,), (0.1,)),
        ("none", None, None),
        ("0.25", None, 0.25),
    ],
)
def test_parse_value(raw, default, expected):
    """
    Values take the type of their default.
    :return: None
    """
    assert parse_value("key", raw, default) == expected


@pytest.mark.parametrize("raw,default", [("ten", 16), ("", (4,)), ("1.5", 2), ("x", None)])
def test_parse_value_errors(raw, default):
    """
    Values that do not convert name their key.
    :return: None
    """
    with pytest.raises(ValueError, match="key"):
        parse_value("key", raw, default)


def test_read_config_file(tmp_path):
    """
    Comments and blank lines are skipped; a line without '=' or a repeated key is refused.
    :return: None
    """
    path = tmp_path / "wave.cfg"
    path.write_text("# wave\nN = 8\n\nq = 1 + x1  # potential\n")
    assert read_config_file(str(path)) == {"N": "8", "q": "1 + x1"}
    path.write_text("N 8\n")
    with pytest.raises(ValueError):
        read_config_file(str(path))
    path.write_text("N = 8\nN = 9\n")
    with pytest.raises(ValueError):
        read_config_file(str(path))
    with pytest.raises(FileNotFoundError):
        read_config_file(str(tmp_path / "missing.cfg"))


def test_load_precedence(tmp_path):
    """
    Defaults, then the file, then the overrides; None overrides are ignored.
    :return: None
    """
    path = tmp_path / "sweep.cfg"
    path.write_text("samples = 5\nn = 4,8\n")
    config = ExperimentConfig.load(
        "carleman-sweep", str(path), {"samples": 7, "tauh": None}, seed=3, out=str(tmp_path)
    )
    assert config["samples"] == 7
    assert config["n"] == (4, 8)
    assert config["tauh"] == (0.1,)
    assert config.seed == 3


@pytest.mark.parametrize(
    "command,content,overrides,seed",
    [
        ("carleman-sweep", "tau = 0.1\n", None, 0),
        ("carleman-sweep", "", {"tau": 0.1}, 0),
        ("unknown", "", None, 0),
        ("ipp-check", "", None, -1),
    ],
)
def test_load_errors(tmp_path, command, content, overrides, seed):
    """
    Unknown commands or keys and seeds outside 64 bits are refused.
    :return: None
    """
    path = tmp_path / "bad.cfg"
    path.write_text(content)
    with pytest.raises(ValueError):
        ExperimentConfig.load(command, str(path), overrides, seed=seed)


def test_manifest(tmp_path):
    """
    The manifest holds the command, the resolved values, the seed and the version.
    :return: None
    """
    config = ExperimentConfig.load("ipp-check", None, {"n": [3, 5]}, seed=9, out=str(tmp_path))
    path = config.write_manifest()
    manifest = read_json(path)
    assert manifest == {
        "command": "ipp-check",
        "config": {"n": [3, 5], "trials": 200},
        "seed": 9,
        "version": __version__,
    }
    assert Path(path).parent == tmp_path
