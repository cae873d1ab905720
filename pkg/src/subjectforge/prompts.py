"""Prompt templates, loaded from the editable ``prompts/*.txt`` assets.

The template id recorded in provenance is the asset's file stem.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def template(template_id: str) -> str:
    path = resources.files("subjectforge").joinpath("prompts", f"{template_id}.txt")
    return path.read_text(encoding="utf-8").rstrip("\n")


def render(template_id: str, **fields) -> str:
    return template(template_id).format(**fields)
