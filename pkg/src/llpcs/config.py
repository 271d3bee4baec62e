"""Config file loading (TOML, or JSON)."""
from __future__ import annotations

import json
from pathlib import Path

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml


def loads_toml(text: str) -> dict:
    return _toml.loads(text)


def load_config(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text)
    return loads_toml(text)
