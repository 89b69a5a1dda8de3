"""Plain-text nested-key configuration.

INI-style files, one section per subcommand plus ``[global]``::

    [global]
    seed = 3

    [finetune]
    steps = 500
    encoder_lr = 1e-4

Keys are flag names with dashes replaced by underscores. Values are parsed
as Python literals when possible (numbers, ``None``, tuples) and kept as
strings otherwise. Command-line flags always win over the file.
"""

from __future__ import annotations

import ast
import configparser
from pathlib import Path


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def load_config(path) -> dict:
    """``{"section.key": value}`` for every entry in the file."""
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(Path(path)):
        raise FileNotFoundError(f"config file not found: {path}")
    flat = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            flat[f"{section}.{key}"] = _parse_value(raw)
    return flat


def section(flat: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}
