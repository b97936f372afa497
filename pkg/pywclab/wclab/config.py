import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

from pywclab import __version__
from pywclab.wclab.constants import COMMAND_DEFAULTS, MANIFEST_FILE
from pywclab.wclab.file_utils import check_path_exists_and_readable, write_json

"""
Experiment configuration: flat `key = value` files with `#` comments, typed by the default table
of each command, and the manifest written next to the outputs of every run.
"""


def parse_value(key: str, raw: str, default: object) -> object:
    """
    Convert a raw string to the type of the default.

    Parameters:
        key (str): Name of the key, used in error messages.
        raw (str): Value as written in the file or on the command line.
        default: Default value; a tuple default makes a comma-separated list of the type of its
            first element, a None default accepts a float or "none".

    Returns:
        The typed value.

    Raises:
        ValueError: If the value does not convert.
    """
    raw = raw.strip()
    try:
        if default is None:
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            items = [item.strip() for item in raw.split(",") if item.strip()]
            if not items:
                raise ValueError("empty list")
            return tuple(kind(item) for item in items)
        return type(default)(raw)
    except ValueError as e:
        raise ValueError(f"Invalid value '{raw}' for key '{key}': {e}") from e


def read_config_file(path: str) -> Dict[str, str]:
    """
    Read `key = value` lines. Blank lines and text after `#` are ignored.

    Raises:
        FileNotFoundError, PermissionError: If the file cannot be read.
        ValueError: On a line without `=` or a repeated key.
    """
    check_path_exists_and_readable(path)
    if not os.path.isfile(path):
        raise ValueError(f"Config '{path}' is not a file.")
    entries = {}
    with open(path) as handle:
        for number, line in enumerate(handle, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{number}: expected 'key = value', got '{line}'.")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in entries:
                raise ValueError(f"{path}:{number}: key '{key}' is set twice.")
            entries[key] = value
    return entries


@dataclass
class ExperimentConfig:
    """
    Resolved configuration of one command run.

    Parameters:
        command (str): Subcommand name, a key of COMMAND_DEFAULTS.
        values (dict): Every key of the command with its typed value.
        seed (int): Root seed of the random streams.
        out (str): Output directory.
    """

    command: str
    values: Dict[str, object] = field(default_factory=dict)
    seed: int = 0
    out: str = "."

    @classmethod
    def load(
        cls,
        command: str,
        path: Optional[str] = None,
        overrides: Optional[Mapping[str, object]] = None,
        seed: int = 0,
        out: str = ".",
    ) -> "ExperimentConfig":
        """
        Defaults of the command, then the file at path, then overrides (already typed, None
        entries ignored).

        Raises:
            ValueError: On an unknown command or key, or a value that does not convert.
        """
        if command not in COMMAND_DEFAULTS:
            raise ValueError(f"Unknown command '{command}'.")
        defaults = COMMAND_DEFAULTS[command]
        values = dict(defaults)
        raw = read_config_file(path) if path is not None else {}
        for key, value in raw.items():
            if key not in defaults:
                raise ValueError(
                    f"Unknown key '{key}' for '{command}'. Expected one of {sorted(defaults)}."
                )
            values[key] = parse_value(key, value, defaults[key])
        for key, value in (overrides or {}).items():
            if key not in defaults:
                raise ValueError(f"Unknown key '{key}' for '{command}'.")
            if value is not None:
                values[key] = tuple(value) if isinstance(defaults[key], tuple) else value
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"The seed must be a 64-bit unsigned integer, got {seed}.")
        logging.info(f"Resolved config for {command}: {values}")
        return cls(command=command, values=values, seed=seed, out=out)

    def __getitem__(self, key: str) -> object:
        return self.values[key]

    def manifest(self) -> Dict[str, object]:
        return {
            "command": self.command,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()},
            "seed": self.seed,
            "version": __version__,
        }

    def write_manifest(self) -> str:
        """Write manifest.json into the output directory and return its path."""
        return write_json(self.manifest(), os.path.join(self.out, MANIFEST_FILE))
