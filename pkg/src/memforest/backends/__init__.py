"""Model ports and the counting bundle the engine talks to.

The engine never calls a port directly; it goes through :class:`Backends`,
which records every call (and failure) in a shared :class:`PortCallLedger`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from ..substrate import TemporalAnchor
from .ledger import PortCallLedger, ledger_delta
from .mock import (
    FixtureExtractor,
    MockChooser,
    MockEmbedder,
    MockExtractor,
    MockPlanner,
    MockSummarizer,
    ScriptedChooser,
    ScriptedPlanner,
)


class BackendError(RuntimeError):
    pass


class TransientBackendError(BackendError):
    """Network or timeout failure; safe to retry."""


class PermanentBackendError(BackendError):
    """Response never matched the expected schema, or the request was rejected."""


@dataclass(frozen=True)
class ChildView:
    """What a branch chooser is shown for one child."""

    index: int
    summary: str
    interval: TemporalAnchor
    is_leaf: bool


@dataclass(frozen=True)
class RootView:
    tree_id: str
    scope: str
    topic: str
    summary: str


@runtime_checkable
class Extractor(Protocol):
    def extract(self, chunk) -> list: ...


@runtime_checkable
class Summarizer(Protocol):
    def summarize(self, texts: list[str], interval: TemporalAnchor | None = None) -> str: ...


@runtime_checkable
class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


@runtime_checkable
class Planner(Protocol):
    def plan(self, query: str, roots: list[RootView]) -> dict[str, str]: ...


@runtime_checkable
class Chooser(Protocol):
    def choose(self, subquery: str, children: list[ChildView], beam_width: int) -> list[int] | None: ...


class Backends:
    def __init__(self, extractor=None, summarizer=None, embedder=None, planner=None, chooser=None,
                 ledger: PortCallLedger | None = None):
        self.extractor = extractor
        self.summarizer = summarizer
        self.embedder = embedder
        self.planner = planner
        self.chooser = chooser
        self.ledger = ledger or PortCallLedger()

    @classmethod
    def mock(cls, dim: int = 16, overrides=None, **ports) -> Backends:
        kw = dict(
            extractor=MockExtractor(),
            summarizer=MockSummarizer(),
            embedder=MockEmbedder(dim, overrides),
            planner=MockPlanner(),
            chooser=MockChooser(),
        )
        kw.update(ports)
        return cls(**kw)

    def replace(self, **ports) -> Backends:
        kw = dict(extractor=self.extractor, summarizer=self.summarizer, embedder=self.embedder,
                  planner=self.planner, chooser=self.chooser, ledger=self.ledger)
        kw.update(ports)
        return Backends(**kw)

    def _call(self, port: str, fn, units_in: int, out_units):
        impl = getattr(self, port)
        if impl is None:
            raise BackendError(f"no {port} configured")
        try:
            result = fn(impl)
        except Exception:
            self.ledger.record(port, units_in, 0, failed=True)
            raise
        self.ledger.record(port, units_in, out_units(result))
        return result

    def extract(self, chunk) -> list:
        units = sum(len(t.text) for t in chunk.turns)
        return self._call("extractor", lambda p: p.extract(chunk), units, len)

    def summarize(self, texts: list[str], interval: TemporalAnchor | None = None) -> str:
        return self._call("summarizer", lambda p: p.summarize(list(texts), interval),
                          sum(len(t) for t in texts), len)

    def embed(self, text: str) -> np.ndarray:
        def run(p):
            v = np.asarray(p.embed(text), dtype=np.float64)
            n = float(np.linalg.norm(v))
            if n == 0.0 or not np.isfinite(n):
                raise PermanentBackendError(f"embedder returned a degenerate vector for {text[:40]!r}")
            return v / n
        return self._call("embedder", run, len(text), lambda v: 1)

    def plan(self, query: str, roots: list[RootView]) -> dict[str, str]:
        return self._call("planner", lambda p: p.plan(query, roots),
                          len(query) + sum(len(r.summary) for r in roots), len)

    def choose(self, subquery: str, children: list[ChildView], beam_width: int):
        return self._call("chooser", lambda p: p.choose(subquery, children, beam_width),
                          len(subquery) + sum(len(c.summary) for c in children),
                          lambda r: 0 if r is None else len(r))

    @property
    def embedding_dim(self) -> int | None:
        return getattr(self.embedder, "dim", None)


def _read_json(path: str | None):
    return json.loads(Path(path).read_text()) if path else None


def build_backends(cfg, ledger: PortCallLedger | None = None) -> Backends:
    """Instantiate ports from a :class:`~memforest.config.BackendConfig`."""
    from . import http

    ledger = ledger or PortCallLedger()

    def port(name: str):
        pc = getattr(cfg, name)
        if pc.kind == "http":
            return http.build_port(name, pc, cfg, ledger)
        if pc.kind == "none":
            return None
        if name == "extractor":
            return FixtureExtractor(pc.fixture) if pc.kind == "fixture" else MockExtractor()
        if name == "summarizer":
            return MockSummarizer()
        if name == "embedder":
            return MockEmbedder(pc.dim, _read_json(pc.overrides))
        if name == "planner":
            if pc.kind == "scripted":
                return ScriptedPlanner(pc.script)
            return MockPlanner(pc.template) if pc.template else MockPlanner()
        if name == "chooser":
            return ScriptedChooser(pc.script) if pc.kind == "scripted" else MockChooser()
        raise BackendError(f"unknown port {name}")

    for name in ("extractor", "summarizer", "embedder", "planner", "chooser"):
        kind = getattr(cfg, name).kind
        allowed = {"mock", "http", "none"} | ({"fixture"} if name == "extractor" else set()) | (
            {"scripted"} if name in ("planner", "chooser") else set())
        if kind not in allowed:
            raise BackendError(f"{name}: unsupported backend kind {kind!r}")
    return Backends(**{n: port(n) for n in ("extractor", "summarizer", "embedder", "planner", "chooser")},
                    ledger=ledger)


__all__ = [
    "Backends",
    "BackendError",
    "TransientBackendError",
    "PermanentBackendError",
    "ChildView",
    "RootView",
    "PortCallLedger",
    "ledger_delta",
    "build_backends",
    "MockExtractor",
    "FixtureExtractor",
    "MockSummarizer",
    "MockEmbedder",
    "MockPlanner",
    "MockChooser",
    "ScriptedPlanner",
    "ScriptedChooser",
]
