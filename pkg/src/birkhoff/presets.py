"""Named hyperparameter grids, read from an INI-style text file.

A preset file looks like::

    [sam-b]
    l = 0.1
    U = 1600
    M = 1, 2, 3
    mae = 0.0019      ; optional reference error

The bundled ``presets.ini`` holds one section per model family.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ParameterError
from .search import SearchSpace

DEFAULT_PRESET = "sam-b"


@dataclass(frozen=True)
class Preset:
    name: str
    space: SearchSpace
    reference_mae: float | None = None


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def parse_presets(text: str, source: str = "<string>") -> dict[str, Preset]:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep "U" and "M" case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParameterError(f"cannot parse preset file {source}: {exc}") from exc
    presets = {}
    for name in parser.sections():
        sec = parser[name]
        try:
            space = SearchSpace(_floats(sec["l"]), _ints(sec["U"]), _ints(sec["M"]))
            mae = float(sec["mae"]) if "mae" in sec else None
        except (KeyError, ValueError) as exc:
            raise ParameterError(f"preset [{name}] in {source}: {exc}") from exc
        presets[name] = Preset(name, space, mae)
    return presets


def load_presets(path: str | Path | None = None) -> dict[str, Preset]:
    """Load presets from ``path``, or the bundled table when ``path`` is None."""
    if path is None:
        text = resources.files(__package__).joinpath("presets.ini").read_text()
        return parse_presets(text, "presets.ini")
    path = Path(path)
    return parse_presets(path.read_text(), str(path))


def get_preset(name: str, path: str | Path | None = None) -> Preset:
    presets = load_presets(path)
    try:
        return presets[name]
    except KeyError:
        available = ", ".join(sorted(presets))
        raise ParameterError(f"unknown preset {name!r}; available: {available}") from None
