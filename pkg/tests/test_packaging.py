import re
from pathlib import Path

ROOT_DIR = Path(__file__).parent.parent


def _manifest_dependencies() -> set:
    names, section = set(), None
    for line in (ROOT_DIR / "pyproject.toml").read_text().splitlines():
        header = re.match(r"^\[(.+)\]$", line.strip())
        if header:
            section = header.group(1)
            continue
        if section in ("tool.poetry.dependencies", "tool.poetry.group.dev.dependencies"):
            match = re.match(r"^([A-Za-z0-9_.-]+)\s*=", line)
            if match and match.group(1) != "python":
                names.add(match.group(1).lower())
    return names


def test_requirements_match_the_manifest():
    """
    requirements.txt lists exactly the runtime and test packages of pyproject.toml.
    :return: None
    """
    lines = (ROOT_DIR / "requirements.txt").read_text().splitlines()
    requirements = {re.split(r"[<>=!~ ]", line.strip())[0].lower() for line in lines if line}
    assert requirements == _manifest_dependencies()
    assert "setuptools" not in requirements
