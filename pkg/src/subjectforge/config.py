"""Run configuration: built-in defaults, an optional JSON file, then flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .errors import ConfigError, InvalidArgument
from .gateway.client import ROLES, ModelEndpoint
from .store import SCENE_STAGES, STAGES

# Config-file keys that differ from the attribute names.
_ALIASES = {"lambda": "lam"}


@dataclass
class RunConfig:
    """Every knob of a run.

    The config file is a flat JSON object using these field names
    (``lambda`` for ``lam``), plus an ``endpoints`` table keyed by role.
    """

    vocabulary_path: str | None = None
    output_root: str = "forge_out"
    n_min: int = 1
    n_max: int = 12
    delta: float = 0.01
    M: int = 8
    lam: float = 0.05
    pooled: bool = False
    complex_prob: float = 0.3
    with_ids_ratio: float = 0.5
    workers: int = 4
    global_seed: int = 0
    backend: str = "mock"
    endpoints: dict = field(default_factory=dict)
    cot_min_words: int | None = None
    similarity_limit: int = 3
    mock_image_size: tuple = (128, 128)
    mock_embed_dim: int = 64
    inject: dict = field(default_factory=dict)
    reduce_rewrite_cot: bool = True

    def validate(self) -> "RunConfig":
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"need 1 <= n_min <= n_max, got n_min={self.n_min}, n_max={self.n_max}")
        if not 0 <= self.delta <= 1:
            raise ConfigError(f"delta must lie in [0, 1], got {self.delta}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        for name in ("complex_prob", "with_ids_ratio"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.backend not in ("mock", "live"):
            raise ConfigError(f"backend must be 'mock' or 'live', got {self.backend!r}")
        if self.cot_min_words is not None and self.cot_min_words < 1:
            raise ConfigError("cot_min_words must be >= 1")
        if self.similarity_limit < 1:
            raise ConfigError("similarity_limit must be >= 1")
        w, h = self.mock_image_size
        if min(w, h) < self.M:
            raise ConfigError(f"mock_image_size {w}x{h} is smaller than the {self.M}x{self.M} grid")
        for stage, rate in self.inject.items():
            if stage not in SCENE_STAGES:
                raise ConfigError(f"cannot inject failures into unknown stage {stage!r}")
            if not 0 <= rate <= 1:
                raise ConfigError(f"injection rate for {stage} must lie in [0, 1]")
        for role in self.endpoints:
            if role not in ROLES:
                raise ConfigError(f"unknown endpoint role {role!r}")
        if self.backend == "live":
            missing = [r for r in ROLES if r not in self.endpoints]
            if missing:
                raise ConfigError(f"live backend needs endpoints for {missing}")
        return self

    def endpoint_table(self) -> dict[str, ModelEndpoint]:
        try:
            return {role: ModelEndpoint.from_dict(role, doc) for role, doc in self.endpoints.items()}
        except (InvalidArgument, TypeError) as exc:
            raise ConfigError(f"bad endpoint table: {exc}") from exc

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        doc["mock_image_size"] = list(self.mock_image_size)
        return doc


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    default = getattr(RunConfig(), name)
    if name == "mock_image_size":
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError("mock_image_size must be [width, height]")
        return tuple(int(v) for v in value)
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, int) or name == "cot_min_words":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{name} must be an object")
        return dict(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


def load_config_file(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return doc


def build_config(file_values: Mapping | None = None, overrides: Mapping | None = None) -> RunConfig:
    """Merge defaults < config file < command-line overrides.

    ``overrides`` entries set to ``None`` are treated as not given.
    """
    values: dict = {}
    for source in (file_values or {}), {k: v for k, v in (overrides or {}).items() if v is not None}:
        for key, value in source.items():
            name = _ALIASES.get(key, key)
            if name not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            values[name] = _coerce(name, value)
    try:
        return RunConfig(**values).validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_injections(items) -> dict[str, float]:
    """``["ovd_verify=0.146", ...]`` to ``{"ovd_verify": 0.146}``."""
    out = {}
    for item in items or ():
        stage, sep, rate = item.partition("=")
        if not sep:
            raise ConfigError(f"--inject expects STAGE=RATE, got {item!r}")
        stage = stage.strip()
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        try:
            out[stage] = float(rate)
        except ValueError as exc:
            raise ConfigError(f"bad rate in {item!r}") from exc
    return out
