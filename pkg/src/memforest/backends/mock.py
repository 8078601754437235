"""Deterministic stand-ins for every model port.

These are the test oracle for the engine: pure functions of their inputs,
safe to call from many threads at once.
"""

from __future__ import annotations

import json
import re
import zlib
from pathlib import Path

import numpy as np

from ..ingest import ExtractionChunk, FactCandidate
from ..substrate import TemporalAnchor, normalize_label

STOPWORDS = frozenset(
    """
    i me my mine we our us you your he him his she her it its they them their this that these those
    a an the and or but if so then than as at by for from in into of on onto to with without about
    is am are was were be been being do does did have has had will would can could should shall may might must
    yes no not ok okay thanks thank hi hello hey sure well also just really very
    what when where which who whom why how there here today yesterday tomorrow tonight
    after before during since until while because although however anyway actually maybe
    monday tuesday wednesday thursday friday saturday sunday
    january february march april may june july august september october november december
    """.split()
)

TOPIC_BUCKETS: dict[str, frozenset[str]] = {
    "residence": frozenset("moved move moving moves live lives lived living house apartment home relocated rent bought".split()),
    "work": frozenset("job work works worked office manager company hired promoted salary career colleague".split()),
    "pets": frozenset("dog cat pet pets adopted puppy kitten vet".split()),
    "travel": frozenset("trip visited visit flight travel traveled vacation beach hotel".split()),
    "food": frozenset("cook cooked cooking recipe restaurant dinner lunch breakfast coffee tea baked".split()),
    "health": frozenset("doctor hospital sick gym workout diet allergy medicine ran running".split()),
    "hobby": frozenset("guitar piano painting hiking reading book books game games chess garden photography".split()),
    "family": frozenset("sister brother mother father mom dad son daughter wife husband cousin married wedding".split()),
}

_SENTENCE = re.compile(r"(?<=[.!?])\s+")
_TOKEN = re.compile(r"[A-Za-z][A-Za-z'\-]*")
_INTERVAL_PREFIX = re.compile(r"^\[[^\]]*\]\s*")
_CLAUSE_END = re.compile(r"[.!?;]")


def _entities(sentence: str) -> list[str]:
    out: list[str] = []
    run: list[str] = []
    for tok in _TOKEN.findall(sentence):
        word = tok[:-2] if tok.endswith("'s") else tok
        if word[:1].isupper() and word.casefold() not in STOPWORDS and len(word) > 1:
            run.append(word)
            continue
        if run:
            out.append(" ".join(run))
            run = []
    if run:
        out.append(" ".join(run))
    seen: list[str] = []
    for e in out:
        label = normalize_label(e)
        if label not in seen:
            seen.append(label)
    return seen


def _topics(sentence: str, buckets) -> list[str]:
    words = {w.casefold() for w in _TOKEN.findall(sentence)}
    return sorted(name for name, kws in buckets.items() if words & kws)


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.split(text.strip()) if s.strip()]


class MockExtractor:
    """Rule-based extractor: one candidate per declarative sentence naming an entity."""

    def __init__(self, topic_buckets: dict[str, frozenset[str]] | None = None, min_words: int = 3):
        self.topic_buckets = topic_buckets or TOPIC_BUCKETS
        self.min_words = min_words

    def extract(self, chunk: ExtractionChunk) -> list[FactCandidate]:
        out = []
        first, last = chunk.turn_range
        for turn in chunk.turns:
            for sentence in split_sentences(turn.text):
                if sentence.endswith("?") or len(_TOKEN.findall(sentence)) < self.min_words:
                    continue
                ents = _entities(sentence)
                if not ents:
                    continue
                out.append(
                    FactCandidate(
                        text=sentence,
                        anchor=chunk.anchor,
                        entities=frozenset(ents),
                        topics=frozenset(_topics(sentence, self.topic_buckets)),
                        first_turn=first,
                        last_turn=last,
                    )
                )
        return out


class FixtureExtractor:
    """Replays candidates from a sidecar keyed by ``"<session_id>:<chunk_index>"``."""

    def __init__(self, sidecar: dict[str, list[dict]] | str | Path):
        if not isinstance(sidecar, dict):
            sidecar = json.loads(Path(sidecar).read_text())
        self.sidecar = sidecar

    def extract(self, chunk: ExtractionChunk) -> list[FactCandidate]:
        first, last = chunk.turn_range
        rows = self.sidecar.get(f"{chunk.session_id}:{chunk.chunk_index}", [])
        return [
            FactCandidate(
                text=r["text"],
                anchor=chunk.anchor,
                entities=frozenset(normalize_label(e) for e in r.get("entities", [])),
                topics=frozenset(r.get("topics", [])),
                first_turn=first,
                last_turn=last,
            )
            for r in rows
        ]


def first_clause(text: str) -> str:
    body = _INTERVAL_PREFIX.sub("", text.strip())
    m = _CLAUSE_END.search(body)
    return (body[: m.start()] if m else body).strip()


class MockSummarizer:
    def __init__(self, cap: int = 480):
        self.cap = cap

    def summarize(self, texts: list[str], interval: TemporalAnchor | None = None) -> str:
        if not texts:
            raise ValueError("summarize needs at least one text")
        body = "; ".join(c for c in (first_clause(t) for t in texts) if c)
        out = f"{interval.render()} {body}" if interval is not None else body
        return out[: self.cap]


class MockEmbedder:
    """Signed feature hashing of words and character trigrams into ``dim`` buckets.

    ``overrides`` pins exact vectors for given texts (matched verbatim, then
    case/space-insensitively) so tests can build precise geometries.
    """

    def __init__(self, dim: int = 16, overrides: dict[str, list[float]] | None = None):
        self.dim = dim
        self.overrides: dict[str, np.ndarray] = {}
        for text, vec in (overrides or {}).items():
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (dim,):
                raise ValueError(f"override for {text!r} has shape {v.shape}, expected ({dim},)")
            v = v / np.linalg.norm(v)
            self.overrides[text] = v
            self.overrides.setdefault(self._norm(text), v)

    @staticmethod
    def _norm(text: str) -> str:
        return " ".join(text.casefold().split())

    def _bump(self, v: np.ndarray, feature: str, weight: float) -> None:
        h = zlib.crc32(feature.encode("utf-8"))
        v[h % self.dim] += weight if (h >> 20) & 1 else -weight

    def embed(self, text: str) -> np.ndarray:
        hit = self.overrides.get(text)
        if hit is None:
            hit = self.overrides.get(self._norm(text))
        if hit is not None:
            return hit.copy()
        v = np.zeros(self.dim, dtype=np.float64)
        low = text.casefold()
        for w in re.findall(r"\w+", low):
            self._bump(v, "w:" + w, 2.0)
        padded = f"  {low} "
        for i in range(len(padded) - 2):
            self._bump(v, "c:" + padded[i:i + 3], 1.0)
        n = float(np.linalg.norm(v))
        if n == 0.0:
            v[0] = 1.0
            return v
        return v / n


class MockPlanner:
    def __init__(self, template: str = "within {topic}: {query}"):
        self.template = template

    def plan(self, query: str, roots) -> dict[str, str]:
        return {r.tree_id: self.template.format(topic=r.topic, query=query) for r in roots}


class ScriptedPlanner:
    """Subqueries looked up by tree id, scope string or topic; unknown trees keep the query."""

    def __init__(self, script: dict[str, str] | str | Path):
        if not isinstance(script, dict):
            script = json.loads(Path(script).read_text())
        self.script = script

    def plan(self, query: str, roots) -> dict[str, str]:
        out = {}
        for r in roots:
            for key in (r.tree_id, r.scope, r.topic):
                if key in self.script:
                    out[r.tree_id] = self.script[key]
                    break
        return out


class ScriptedChooser:
    """Replays a fixed list of responses per subquery; unknown or exhausted -> stop."""

    def __init__(self, script: dict[str, list] | str | Path):
        if not isinstance(script, dict):
            script = json.loads(Path(script).read_text())
        self.script = {q: list(steps) for q, steps in script.items()}
        self._cursor: dict[str, int] = {}

    def choose(self, subquery: str, children, beam_width: int):
        steps = self.script.get(subquery)
        i = self._cursor.get(subquery, 0)
        if steps is None or i >= len(steps):
            return None
        self._cursor[subquery] = i + 1
        return steps[i]


_BEFORE = re.compile(r"\bbefore\b(.*)", re.IGNORECASE)
_AFTER = re.compile(r"\bafter\b(.*)", re.IGNORECASE)


class MockChooser:
    """Heuristic branch chooser.

    ``before X`` / ``after X`` queries pick the neighbour of the first child
    mentioning a capitalised term of X; otherwise children are ranked by word
    overlap with the subquery. Returns None (stop) when nothing overlaps.
    """

    def choose(self, subquery: str, children, beam_width: int):
        for pattern, step in ((_BEFORE, -1), (_AFTER, 1)):
            m = pattern.search(subquery)
            if not m:
                continue
            terms = [t.casefold() for t in _TOKEN.findall(m.group(1)) if t[:1].isupper()]
            if not terms:
                continue
            hits = [i for i, c in enumerate(children) if any(t in c.summary.casefold() for t in terms)]
            if not hits:
                continue
            pivot = hits[0] if step < 0 else hits[-1]
            target = pivot + step
            if children[0].is_leaf:
                return [target] if 0 <= target < len(children) else None
            picks = [i for i in (target, pivot) if 0 <= i < len(children)]
            if step > 0:
                picks.reverse()
            return picks[:beam_width]
        words = {w.casefold() for w in _TOKEN.findall(subquery)} - STOPWORDS
        scored = []
        for i, c in enumerate(children):
            overlap = len(words & {w.casefold() for w in _TOKEN.findall(c.summary)})
            if overlap:
                scored.append((-overlap, i))
        if not scored:
            return None
        return [i for _, i in sorted(scored)[:beam_width]]
