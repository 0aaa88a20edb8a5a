"""JSON schemas shipped with the package for every document it writes."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

SCHEMAS = ("ablate", "bench", "container_header", "flops", "forward", "merge_map", "tokens", "train", "train_log")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(f"no schema named {name!r}")
    return json.loads(resources.files("tempme").joinpath("schemas", f"{name}.json").read_text())


def validate(document: dict, name: str) -> None:
    """Raise ``jsonschema.ValidationError`` when ``document`` does not fit."""
    jsonschema.Draft202012Validator(load_schema(name)).validate(document)
