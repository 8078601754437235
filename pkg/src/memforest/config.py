"""Engine and backend configuration, loaded from a single JSON file.

Layout::

    {
      "memforest": {"chunk_size": 2, "theta_scene": 0.6, "tree": {"k_entity": 8}, ...},
      "backends": {"embedder": {"kind": "mock", "dim": 16}, "summarizer": {"kind": "http", ...}}
    }

Every key is optional; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


COMBINERS = ("max", "mean", "weighted")


@dataclass
class TreeConfig:
    k_session: int = 8
    k_entity: int = 8
    k_scene: int = 8

    def k_for(self, family: str) -> int:
        return getattr(self, f"k_{family}")


@dataclass
class RetrievalConfig:
    k_root: int = 10
    k_fact: int = 20
    k_trees: int = 5
    beam_width: int = 2
    leaf_budget: int = 10
    step_budget: int | None = None  # None -> 2 * tree height
    final_top_k: int = 10
    combiner: str = "max"
    alpha: float = 0.5


@dataclass
class MemForestConfig:
    chunk_size: int = 2
    concurrency: int = 8
    retries: int = 2
    chunk_error_policy: str = "skip-chunk"
    theta_scene: float = 0.60
    flush_parallelism: int = 8
    tree: TreeConfig = field(default_factory=TreeConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)

    def validate(self) -> MemForestConfig:
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.concurrency < 1 or self.flush_parallelism < 1:
            raise ConfigError("concurrency budgets must be >= 1")
        if self.chunk_error_policy not in ("abort", "skip-chunk"):
            raise ConfigError(f"unknown chunk_error_policy {self.chunk_error_policy!r}")
        for fam in ("session", "entity", "scene"):
            if self.tree.k_for(fam) < 2:
                raise ConfigError(f"k_{fam} must be >= 2")
        if self.retrieval.combiner not in COMBINERS:
            raise ConfigError(f"unknown combiner {self.retrieval.combiner!r}")
        return self


@dataclass
class PortConfig:
    kind: str = "mock"
    base_url: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    timeout: float = 60.0
    dim: int = 16
    overrides: str | None = None  # mock embedder geometry table (JSON path)
    script: str | None = None  # scripted planner/chooser (JSON path)
    fixture: str | None = None  # extractor sidecar (JSON path)
    template: str | None = None


@dataclass
class BackendConfig:
    extractor: PortConfig = field(default_factory=PortConfig)
    summarizer: PortConfig = field(default_factory=PortConfig)
    embedder: PortConfig = field(default_factory=PortConfig)
    planner: PortConfig = field(default_factory=PortConfig)
    chooser: PortConfig = field(default_factory=PortConfig)
    max_retries: int = 2
    backoff_base: float = 0.5


def _build(cls, data: dict[str, Any] | None):
    data = dict(data or {})
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        kwargs[name] = _build(type(default), value) if is_dataclass(default) else value
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> tuple[MemForestConfig, BackendConfig]:
    unknown = set(data) - {"memforest", "backends"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys {sorted(unknown)}")
    return _build(MemForestConfig, data.get("memforest")).validate(), _build(BackendConfig, data.get("backends"))


def load_config(path: str | Path | None) -> tuple[MemForestConfig, BackendConfig]:
    if path is None:
        return MemForestConfig(), BackendConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def engine_config_to_dict(cfg: MemForestConfig) -> dict:
    return asdict(cfg)


def engine_config_from_dict(d: dict) -> MemForestConfig:
    return _build(MemForestConfig, d).validate()
