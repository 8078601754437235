"""Persistent data model: sessions, canonical facts, scopes, placement and registry.

Everything in here is either an immutable value (turns, anchors, facts, cells)
or a small reverse index that is only mutated inside a maintenance
transaction (``PlacementMap``, ``SessionRegistry``).

Instants are stored as integer UTC epoch seconds.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator, NamedTuple

PRECISIONS = ("second", "day", "month", "year")
_PRECISION_RANK = {p: i for i, p in enumerate(PRECISIONS)}

FAMILIES = ("session", "entity", "scene")
SPEAKERS = ("user", "assistant")


class EmptyFactError(ValueError):
    pass


# ---------------------------------------------------------------------------
# time
# ---------------------------------------------------------------------------

_LME_DATE = re.compile(r"^(\d{4})/(\d{2})/(\d{2})(?:\s*\([A-Za-z]+\))?(?:\s+(\d{1,2}):(\d{2}))?$")


def parse_instant(value: str | int | float | datetime) -> tuple[int, str]:
    """Parse a timestamp into ``(epoch_seconds, precision)``.

    Accepts ISO-8601 strings (with or without time), LongMemEval style
    ``2023/05/20 (Sat) 02:21`` strings, datetimes and raw epoch numbers.
    Date-only inputs map to midnight UTC with precision ``day``.
    """
    if isinstance(value, datetime):
        dt = value if value.tzinfo else value.replace(tzinfo=timezone.utc)
        return int(dt.timestamp()), "second"
    if isinstance(value, (int, float)):
        return int(value), "second"
    text = value.strip()
    m = _LME_DATE.match(text)
    if m:
        y, mo, d, hh, mm = m.groups()
        dt = datetime(int(y), int(mo), int(d), int(hh or 0), int(mm or 0), tzinfo=timezone.utc)
        return int(dt.timestamp()), ("second" if hh is not None else "day")
    if re.fullmatch(r"\d{4}-\d{2}-\d{2}", text):
        dt = datetime.fromisoformat(text).replace(tzinfo=timezone.utc)
        return int(dt.timestamp()), "day"
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp()), "second"


def format_instant(ts: int, precision: str = "second") -> str:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if precision == "second":
        return dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    if precision == "day":
        return dt.strftime("%Y-%m-%d")
    if precision == "month":
        return dt.strftime("%Y-%m")
    return dt.strftime("%Y")


def coarser(a: str, b: str) -> str:
    return a if _PRECISION_RANK[a] >= _PRECISION_RANK[b] else b


@dataclass(frozen=True, order=True)
class TemporalAnchor:
    start: int
    end: int
    precision: str = "second"

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"anchor end {self.end} precedes start {self.start}")
        if self.precision not in _PRECISION_RANK:
            raise ValueError(f"unknown precision {self.precision!r}")

    @classmethod
    def point(cls, ts: int, precision: str = "second") -> TemporalAnchor:
        return cls(ts, ts, precision)

    def union(self, other: TemporalAnchor) -> TemporalAnchor:
        return TemporalAnchor(
            min(self.start, other.start), max(self.end, other.end), coarser(self.precision, other.precision)
        )

    def contains(self, other: TemporalAnchor) -> bool:
        return self.start <= other.start and other.end <= self.end

    def render(self) -> str:
        p = "day" if self.precision == "second" else self.precision
        a, b = format_instant(self.start, p), format_instant(self.end, p)
        return f"[{a}]" if a == b else f"[{a}..{b}]"

    def to_json(self) -> dict:
        return {"start": format_instant(self.start), "end": format_instant(self.end), "precision": self.precision}

    @classmethod
    def from_json(cls, d: dict) -> TemporalAnchor:
        return cls(parse_instant(d["start"])[0], parse_instant(d["end"])[0], d.get("precision", "second"))


def anchor_union(anchors: Iterable[TemporalAnchor]) -> TemporalAnchor:
    it = iter(anchors)
    out = next(it)
    for a in it:
        out = out.union(a)
    return out


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Turn:
    session_id: str
    index: int
    speaker: str
    text: str
    timestamp: int
    precision: str = "second"

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("turn index must be >= 1")
        if self.speaker not in SPEAKERS:
            raise ValueError(f"unknown speaker {self.speaker!r}")


@dataclass(frozen=True)
class Session:
    session_id: str
    turns: tuple[Turn, ...]
    arrival_seq: int = 0

    def __post_init__(self):
        if not self.turns:
            raise ValueError(f"session {self.session_id} has no turns")
        prev = None
        for i, t in enumerate(self.turns, start=1):
            if t.index != i or t.session_id != self.session_id:
                raise ValueError(f"session {self.session_id}: turn {i} is misnumbered or foreign")
            if prev is not None and t.timestamp < prev:
                raise ValueError(f"session {self.session_id}: timestamps decrease at turn {i}")
            prev = t.timestamp

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "arrival_seq": self.arrival_seq,
            "turns": [
                {
                    "role": t.speaker,
                    "content": t.text,
                    "timestamp": format_instant(t.timestamp),
                    "precision": t.precision,
                }
                for t in self.turns
            ],
        }

    @classmethod
    def from_json(cls, d: dict, arrival_seq: int | None = None) -> Session:
        """Build from the session input shape; missing turn stamps inherit the session stamp."""
        sid = str(d["session_id"])
        base = d.get("timestamp")
        turns = []
        for i, raw in enumerate(d["turns"], start=1):
            stamp = raw.get("timestamp", base)
            if stamp is None:
                raise ValueError(f"session {sid}: turn {i} has no timestamp and the session has none")
            ts, prec = parse_instant(stamp)
            prec = raw.get("precision", prec)
            turns.append(Turn(sid, i, raw["role"], raw["content"], ts, prec))
        seq = d.get("arrival_seq", 0) if arrival_seq is None else arrival_seq
        return cls(sid, tuple(turns), seq)


def derive_anchor(turns: Iterable[Turn]) -> TemporalAnchor:
    turns = list(turns)
    if not turns:
        raise ValueError("cannot derive an anchor from zero turns")
    for a, b in zip(turns, turns[1:]):
        if b.timestamp < a.timestamp:
            raise ValueError("turn timestamps must be nondecreasing")
    prec = "second"
    for t in turns:
        prec = coarser(prec, t.precision)
    return TemporalAnchor(turns[0].timestamp, turns[-1].timestamp, prec)


# ---------------------------------------------------------------------------
# facts
# ---------------------------------------------------------------------------

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")
_WS = re.compile(r"\s+")


def canonical_key(text: str) -> str:
    """Lexical dedup key: case-folded, punctuation-stripped, whitespace-collapsed."""
    key = _WS.sub(" ", _PUNCT.sub(" ", text.casefold())).strip()
    if not key:
        raise EmptyFactError(f"fact text {text!r} is empty after normalization")
    return key


def normalize_label(label: str) -> str:
    return _WS.sub(" ", label.casefold()).strip()


class SourceRef(NamedTuple):
    session_id: str
    first_turn: int
    last_turn: int


@dataclass(frozen=True)
class Mention:
    """One extracted occurrence of a fact, kept so deletes can undo merges exactly."""

    session_id: str
    first_turn: int
    last_turn: int
    text: str
    anchor: TemporalAnchor
    entities: frozenset[str] = frozenset()
    topics: frozenset[str] = frozenset()

    @property
    def ref(self) -> SourceRef:
        return SourceRef(self.session_id, self.first_turn, self.last_turn)

    def sort_key(self):
        return (self.anchor.start, self.anchor.end, self.session_id, self.first_turn, self.text)


@dataclass(frozen=True)
class CanonicalFact:
    fact_id: str
    text: str
    anchor: TemporalAnchor
    source_refs: frozenset[SourceRef]
    entities: frozenset[str]
    topics: frozenset[str]
    canonical_key: str
    mentions: tuple[Mention, ...] = field(repr=False, default=())

    @classmethod
    def from_mentions(cls, fact_id: str, mentions: Iterable[Mention]) -> CanonicalFact:
        ms = tuple(sorted(set(mentions), key=Mention.sort_key))
        if not ms:
            raise ValueError(f"fact {fact_id} needs at least one mention")
        keys = {canonical_key(m.text) for m in ms}
        if len(keys) != 1:
            raise ValueError(f"fact {fact_id} mixes canonical keys {sorted(keys)}")
        return cls(
            fact_id=fact_id,
            text=ms[0].text,
            anchor=anchor_union(m.anchor for m in ms),
            source_refs=frozenset(m.ref for m in ms),
            entities=frozenset().union(*(m.entities for m in ms)),
            topics=frozenset().union(*(m.topics for m in ms)),
            canonical_key=keys.pop(),
            mentions=ms,
        )

    def with_mentions(self, mentions: Iterable[Mention]) -> CanonicalFact:
        return CanonicalFact.from_mentions(self.fact_id, mentions)

    def without_session(self, session_id: str) -> CanonicalFact | None:
        left = [m for m in self.mentions if m.session_id != session_id]
        return self.with_mentions(left) if left else None

    @property
    def session_ids(self) -> frozenset[str]:
        return frozenset(r.session_id for r in self.source_refs)

    def to_json(self) -> dict:
        return {
            "fact_id": self.fact_id,
            "text": self.text,
            "canonical_key": self.canonical_key,
            "mentions": [
                {
                    "session_id": m.session_id,
                    "turns": [m.first_turn, m.last_turn],
                    "text": m.text,
                    "anchor": m.anchor.to_json(),
                    "entities": sorted(m.entities),
                    "topics": sorted(m.topics),
                }
                for m in self.mentions
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> CanonicalFact:
        ms = [
            Mention(
                m["session_id"],
                m["turns"][0],
                m["turns"][1],
                m["text"],
                TemporalAnchor.from_json(m["anchor"]),
                frozenset(m["entities"]),
                frozenset(m["topics"]),
            )
            for m in d["mentions"]
        ]
        return cls.from_mentions(d["fact_id"], ms)


# ---------------------------------------------------------------------------
# scopes, cells, routed records
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ScopeId:
    family: str
    key: str

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown scope family {self.family!r}")
        if not self.key:
            raise ValueError("scope key must be nonempty")
        if self.family == "entity" and self.key != normalize_label(self.key):
            raise ValueError(f"entity scope key {self.key!r} is not normalized")

    def __str__(self) -> str:
        return f"{self.family}:{self.key}"

    @classmethod
    def parse(cls, s: str) -> ScopeId:
        family, _, key = s.partition(":")
        return cls(family, key)


class PayloadRef(NamedTuple):
    kind: str  # "fact" | "cell"
    id: str

    def __str__(self) -> str:
        return f"{self.kind}:{self.id}"

    @classmethod
    def parse(cls, s: str) -> PayloadRef:
        kind, _, pid = s.partition(":")
        return cls(kind, pid)


@dataclass(frozen=True)
class DialogueCell:
    cell_id: str
    session_id: str
    first_turn: int
    last_turn: int
    text: str
    anchor: TemporalAnchor

    def to_json(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "session_id": self.session_id,
            "turns": [self.first_turn, self.last_turn],
            "text": self.text,
            "anchor": self.anchor.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> DialogueCell:
        return cls(d["cell_id"], d["session_id"], d["turns"][0], d["turns"][1], d["text"],
                   TemporalAnchor.from_json(d["anchor"]))


@dataclass(frozen=True)
class RoutedRecord:
    scope: ScopeId
    payload: PayloadRef
    anchor: TemporalAnchor

    def __post_init__(self):
        want = "cell" if self.scope.family == "session" else "fact"
        if self.payload.kind != want:
            raise ValueError(f"{self.scope.family} scope expects a {want} payload, got {self.payload.kind}")


# ---------------------------------------------------------------------------
# reverse indexes
# ---------------------------------------------------------------------------


class PlacementMap:
    """payload -> {(tree_id, leaf_id)}; the inverse of every tree leaf."""

    def __init__(self):
        self._map: dict[PayloadRef, set[tuple[str, str]]] = {}

    def add(self, payload: PayloadRef, tree_id: str, leaf_id: str) -> None:
        self._map.setdefault(payload, set()).add((tree_id, leaf_id))

    def remove(self, payload: PayloadRef, tree_id: str, leaf_id: str) -> None:
        entries = self._map.get(payload)
        if entries is None:
            return
        entries.discard((tree_id, leaf_id))
        if not entries:
            del self._map[payload]

    def get(self, payload: PayloadRef) -> set[tuple[str, str]]:
        return set(self._map.get(payload, ()))

    def trees_of(self, payload: PayloadRef) -> set[str]:
        return {t for t, _ in self._map.get(payload, ())}

    def leaf_in(self, payload: PayloadRef, tree_id: str) -> str | None:
        for t, leaf in self._map.get(payload, ()):
            if t == tree_id:
                return leaf
        return None

    def __contains__(self, payload: PayloadRef) -> bool:
        return payload in self._map

    def __len__(self) -> int:
        return len(self._map)

    def items(self) -> Iterator[tuple[PayloadRef, set[tuple[str, str]]]]:
        for p in sorted(self._map):
            yield p, set(self._map[p])

    def as_dict(self) -> dict[str, list[list[str]]]:
        return {str(p): sorted([list(e) for e in v]) for p, v in self.items()}

    def __eq__(self, other):
        return isinstance(other, PlacementMap) and self._map == other._map


@dataclass(frozen=True)
class SessionArtifacts:
    fact_ids: frozenset[str] = frozenset()
    cell_ids: frozenset[str] = frozenset()
    tree_ids: frozenset[str] = frozenset()

    def to_json(self) -> dict:
        return {"facts": sorted(self.fact_ids), "cells": sorted(self.cell_ids), "trees": sorted(self.tree_ids)}

    @classmethod
    def from_json(cls, d: dict) -> SessionArtifacts:
        return cls(frozenset(d["facts"]), frozenset(d["cells"]), frozenset(d["trees"]))


class SessionRegistry:
    def __init__(self):
        self._entries: dict[str, SessionArtifacts] = {}

    def lookup(self, session_id: str) -> SessionArtifacts:
        return self._entries.get(session_id, SessionArtifacts())

    def remove(self, session_id: str) -> SessionArtifacts | None:
        return self._entries.pop(session_id, None)

    def __contains__(self, session_id: str) -> bool:
        return session_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterator[tuple[str, SessionArtifacts]]:
        for sid in sorted(self._entries):
            yield sid, self._entries[sid]

    def set(self, session_id: str, artifacts: SessionArtifacts) -> None:
        self._entries[session_id] = artifacts

    def __eq__(self, other):
        return isinstance(other, SessionRegistry) and self._entries == other._entries


def register_session(reg: SessionRegistry, session_id: str, artifacts: SessionArtifacts) -> SessionRegistry:
    reg.set(session_id, artifacts)
    return reg


class IdAllocator:
    """Monotonic per-prefix counters producing opaque, sortable ids like ``F00000012``."""

    WIDTH = 8

    def __init__(self, counters: dict[str, int] | None = None):
        self.counters: dict[str, int] = dict(counters or {})

    def next(self, prefix: str) -> str:
        n = self.counters.get(prefix, 0) + 1
        self.counters[prefix] = n
        return f"{prefix}{n:0{self.WIDTH}d}"

    def factory(self, prefix: str) -> IdFactory:
        return IdFactory(self, prefix)


class IdFactory:
    """Zero-argument id source bound to an allocator; survives ``copy.deepcopy`` with its owner."""

    __slots__ = ("allocator", "prefix")

    def __init__(self, allocator: IdAllocator, prefix: str):
        self.allocator = allocator
        self.prefix = prefix

    def __call__(self) -> str:
        return self.allocator.next(self.prefix)
