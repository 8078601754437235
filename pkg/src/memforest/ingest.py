"""Session ingestion: chunk partitioning, concurrent extraction, lexical canonicalization."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

from .substrate import (
    CanonicalFact,
    DialogueCell,
    EmptyFactError,
    Mention,
    Session,
    TemporalAnchor,
    Turn,
    canonical_key,
    derive_anchor,
)

logger = logging.getLogger(__name__)


class IngestError(RuntimeError):
    pass


class AlreadyIngested(IngestError):
    pass


@dataclass(frozen=True)
class ExtractionChunk:
    session_id: str
    chunk_index: int  # 1-based
    turns: tuple[Turn, ...]
    anchor: TemporalAnchor

    @property
    def turn_range(self) -> tuple[int, int]:
        return self.turns[0].index, self.turns[-1].index

    def render(self) -> str:
        return "\n".join(f"{t.speaker}: {t.text}" for t in self.turns)


@dataclass(frozen=True)
class FactCandidate:
    text: str
    anchor: TemporalAnchor
    entities: frozenset[str] = frozenset()
    topics: frozenset[str] = frozenset()
    first_turn: int = 1
    last_turn: int = 1
    session_id: str = ""

    def mention(self) -> Mention:
        return Mention(self.session_id, self.first_turn, self.last_turn, self.text, self.anchor,
                       self.entities, self.topics)


@dataclass(frozen=True)
class ChunkError:
    chunk_index: int
    attempts: int
    message: str


@dataclass
class ExtractionResult:
    candidates: list[FactCandidate]
    errors: list[ChunkError]


@dataclass(frozen=True)
class MergeLogEntry:
    canonical_key: str
    fact_id: str
    session_id: str
    turns: tuple[int, int]
    into_existing: bool


@dataclass
class CanonicalizeResult:
    new_facts: list[CanonicalFact]
    updated_facts: list[tuple[CanonicalFact, CanonicalFact]]  # (before, after)
    merge_log: list[MergeLogEntry]
    skipped: list[str]


@dataclass
class IngestReport:
    session_id: str
    chunks: int = 0
    candidates: int = 0
    facts: int = 0
    duplicates_merged: int = 0
    updated_facts: int = 0
    skipped_candidates: int = 0
    chunk_errors: list[ChunkError] = field(default_factory=list)
    fact_ids: list[str] = field(default_factory=list)
    trees_touched: list[str] = field(default_factory=list)
    deferred_scene: list[str] = field(default_factory=list)
    port_calls: dict[str, int] = field(default_factory=dict)
    flush: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def to_json(self, timings: bool = False) -> dict:
        out = {
            "session_id": self.session_id,
            "chunks": self.chunks,
            "candidates": self.candidates,
            "facts": self.facts,
            "duplicates_merged": self.duplicates_merged,
            "updated_facts": self.updated_facts,
            "skipped_candidates": self.skipped_candidates,
            "chunk_errors": [e.__dict__ for e in self.chunk_errors],
            "fact_ids": self.fact_ids,
            "trees_touched": self.trees_touched,
            "deferred_scene": self.deferred_scene,
            "port_calls": self.port_calls,
            "flush": self.flush,
        }
        if timings:
            out["wall_seconds"] = round(self.wall_seconds, 6)
        return out


def partition(session: Session, b: int) -> list[ExtractionChunk]:
    """Split a session into consecutive chunks of ``b`` turns (the last may be shorter)."""
    if b < 1:
        from .config import ConfigError
        raise ConfigError(f"chunk size must be >= 1, got {b}")
    turns = session.turns
    return [
        ExtractionChunk(session.session_id, j + 1, turns[i:i + b], derive_anchor(turns[i:i + b]))
        for j, i in enumerate(range(0, len(turns), b))
    ]


def cells_for(chunks: list[ExtractionChunk], new_id: Callable[[], str]) -> list[DialogueCell]:
    """One dialogue cell per extraction chunk, so session leaves align with extraction units."""
    return [DialogueCell(new_id(), c.session_id, *c.turn_range, c.render(), c.anchor) for c in chunks]


def _check_candidate(chunk: ExtractionChunk, cand: FactCandidate) -> FactCandidate:
    lo, hi = chunk.turn_range
    if not lo <= cand.first_turn <= cand.last_turn <= hi:
        raise ValueError(f"candidate turns {cand.first_turn}-{cand.last_turn} fall outside chunk {lo}-{hi}")
    return replace(cand, session_id=chunk.session_id)


def extract_chunks(chunks: list[ExtractionChunk], backends, concurrency: int = 8,
                   retries: int = 2) -> ExtractionResult:
    """Run the extractor over every chunk, at most ``concurrency`` at a time.

    Each chunk gets ``retries`` extra attempts; a chunk that still fails is
    reported in ``errors`` while its siblings' candidates are kept. Output is
    ordered by (chunk index, extractor order) whatever the completion order.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")

    def one(chunk: ExtractionChunk):
        last = None
        for attempt in range(1, retries + 2):
            try:
                return [_check_candidate(chunk, c) for c in backends.extract(chunk)], None
            except Exception as exc:  # isolate the chunk, retry, then report
                last = exc
                logger.info("extraction of %s chunk %d failed (attempt %d): %s",
                            chunk.session_id, chunk.chunk_index, attempt, exc)
        return [], ChunkError(chunk.chunk_index, retries + 1, str(last))

    if concurrency == 1 or len(chunks) <= 1:
        results = [one(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=min(concurrency, len(chunks))) as pool:
            results = list(pool.map(one, chunks))
    cands = [c for got, _ in results for c in got]
    errors = [err for _, err in results if err is not None]
    return ExtractionResult(cands, errors)


def canonicalize(candidates: list[FactCandidate], existing: Mapping[str, CanonicalFact],
                 new_id: Callable[[], str]) -> CanonicalizeResult:
    """Group candidates by canonical key and fold each group into one fact.

    ``existing`` maps canonical keys to stored facts; a group whose key is
    already stored extends that fact's mentions instead of creating a fact.
    Every candidate beyond the first of a new group, and every candidate
    landing on a stored fact, produces one merge-log entry.
    """
    groups: dict[str, list[Mention]] = {}
    skipped: list[str] = []
    for cand in candidates:
        try:
            key = canonical_key(cand.text)
        except EmptyFactError:
            logger.info("skipping empty candidate %r from %s", cand.text, cand.session_id)
            skipped.append(cand.text)
            continue
        groups.setdefault(key, []).append(cand.mention())
    new_facts, updated, log = [], [], []
    for key, mentions in groups.items():
        old = existing.get(key)
        if old is not None:
            after = old.with_mentions(old.mentions + tuple(mentions))
            updated.append((old, after))
            log.extend(MergeLogEntry(key, old.fact_id, m.session_id, (m.first_turn, m.last_turn), True)
                       for m in mentions)
            continue
        fact = CanonicalFact.from_mentions(new_id(), mentions)
        new_facts.append(fact)
        log.extend(MergeLogEntry(key, fact.fact_id, m.session_id, (m.first_turn, m.last_turn), False)
                   for m in mentions[1:])
    return CanonicalizeResult(new_facts, updated, log, skipped)


def ingest_session(store, session: Session, backends, config=None) -> IngestReport:
    """Partition, extract, canonicalize, route and materialize one session.

    The store is modified only after extraction finishes; with the ``abort``
    policy a chunk failure raises before anything is written.
    """
    from .backends import ledger_delta
    from .memtree import apply_updates
    from .router import route_session

    cfg = config or store.config
    t0 = time.perf_counter()
    if session.session_id in store.sessions:
        raise AlreadyIngested(f"session {session.session_id} already ingested; delete it first")
    before = backends.ledger.snapshot()
    report = IngestReport(session.session_id)
    chunks = partition(session, cfg.chunk_size)
    report.chunks = len(chunks)
    extracted = extract_chunks(chunks, backends, cfg.concurrency, cfg.retries)
    report.chunk_errors = extracted.errors
    if extracted.errors and cfg.chunk_error_policy == "abort":
        raise IngestError(f"{len(extracted.errors)} chunk(s) of {session.session_id} failed: "
                          + "; ".join(f"#{e.chunk_index}: {e.message}" for e in extracted.errors))

    canon = canonicalize(extracted.candidates, store.facts_by_key(), lambda: store.ids.next("F"))
    report.skipped_candidates = len(canon.skipped)
    report.candidates = len(extracted.candidates) - len(canon.skipped)
    report.facts = len(canon.new_facts)
    report.duplicates_merged = len(canon.merge_log)
    report.updated_facts = len(canon.updated_facts)

    store.add_session(session)
    cells = cells_for(chunks, lambda: store.ids.next("C"))
    for cell in cells:
        store.add_cell(cell)
    for fact in canon.new_facts:
        store.put_fact(fact)
    for old, new in canon.updated_facts:
        store.replace_fact(old, new)
    touched = canon.new_facts + [new for _, new in canon.updated_facts]
    records = route_session(store, touched, cells, backends)
    flush = apply_updates(store, records, backends, cfg.flush_parallelism)

    fact_ids = sorted(f.fact_id for f in touched)
    report.fact_ids = fact_ids
    report.deferred_scene = sorted(set(fact_ids) & store.scenes.pending)
    report.trees_touched = flush.trees
    report.flush = flush.to_json()
    store.register(session.session_id, fact_ids, [c.cell_id for c in cells])
    report.port_calls = {p: d["calls"] for p, d in ledger_delta(backends.ledger.snapshot(), before).items()}
    report.wall_seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# input files
# ---------------------------------------------------------------------------


def _longmemeval_sessions(d: dict) -> list[dict]:
    ids = d.get("haystack_session_ids") or [f"s{i + 1}" for i in range(len(d["haystack_sessions"]))]
    out = []
    for sid, date, turns in zip(ids, d["haystack_dates"], d["haystack_sessions"]):
        out.append({"session_id": str(sid), "timestamp": date,
                    "turns": [{"role": t["role"], "content": t["content"]} for t in turns]})
    return out


def sessions_from_json(data) -> list[Session]:
    """Accept the native ``{"sessions": [...]}`` shape or a LongMemEval instance (or list of them)."""
    if isinstance(data, list):
        raw = [s for inst in data for s in _longmemeval_sessions(inst)]
    elif "sessions" in data:
        raw = data["sessions"]
    elif "haystack_sessions" in data:
        raw = _longmemeval_sessions(data)
    else:
        raise ValueError("input has neither 'sessions' nor 'haystack_sessions'")
    return [Session.from_json(s, arrival_seq=i) for i, s in enumerate(raw)]


def load_sessions(path: str | Path) -> list[Session]:
    return sessions_from_json(json.loads(Path(path).read_text()))
