import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memforest.backends import Backends
from memforest.backends.mock import MockExtractor
from memforest.config import ConfigError, MemForestConfig
from memforest.ingest import (AlreadyIngested, IngestError, canonicalize, extract_chunks, ingest_session,
                              partition, sessions_from_json)
from memforest.store import MemoryStore
from memforest.substrate import ScopeId, Session, TemporalAnchor
from memforest.synth import bob_sessions, random_sessions
from oracles import chunk_sizes_oracle


def _session(n, sid="s"):
    return Session.from_json({"session_id": sid, "timestamp": "2024-01-01", "turns": [
        {"role": "user" if i % 2 == 0 else "assistant", "content": f"Turn {i} mentions Alice in Paris."}
        for i in range(n)]})


@pytest.mark.parametrize("n, b, sizes", [(5, 2, [2, 2, 1]), (4, 2, [2, 2]), (3, 8, [3])])
def test_partition_examples(n, b, sizes):
    assert [len(c.turns) for c in partition(_session(n), b)] == sizes


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 12))
def test_partition_round_trip(n, b):
    s = _session(n)
    chunks = partition(s, b)
    assert [t for c in chunks for t in c.turns] == list(s.turns)
    assert [len(c.turns) for c in chunks] == chunk_sizes_oracle(n, b)
    for j, c in enumerate(chunks):
        assert c.turn_range == (j * b + 1, min((j + 1) * b, n))


def test_partition_rejects_bad_chunk_size():
    with pytest.raises(ConfigError):
        partition(_session(2), 0)


class OnePerChunk:
    def extract(self, chunk):
        return MockExtractor().extract(chunk)[:1]


class FailOn:
    def __init__(self, bad):
        self.bad = bad

    def extract(self, chunk):
        if chunk.chunk_index == self.bad:
            raise RuntimeError("boom")
        return MockExtractor().extract(chunk)[:1]


def test_extract_one_candidate_per_chunk_in_order():
    chunks = partition(_session(6), 2)
    res = extract_chunks(chunks, Backends.mock(extractor=OnePerChunk()), concurrency=4)
    assert [c.first_turn for c in res.candidates] == [1, 3, 5]
    assert not res.errors


def test_extract_is_invariant_under_concurrency():
    s = random_sessions(random.Random(5), 1, max_turns=30)[0]
    chunks = partition(s, 2)
    a = extract_chunks(chunks, Backends.mock(), concurrency=1).candidates
    b = extract_chunks(chunks, Backends.mock(), concurrency=8).candidates
    assert a == b


def test_extract_isolates_failing_chunk():
    chunks = partition(_session(6), 2)
    be = Backends.mock(extractor=FailOn(1))
    res = extract_chunks(chunks, be, concurrency=3, retries=2)
    assert len(res.candidates) == 2
    assert [e.chunk_index for e in res.errors] == [1]
    assert be.ledger.snapshot()["extractor"]["failures"] == 3  # first try + two retries


def _cands(*texts):
    from memforest.ingest import FactCandidate

    return [FactCandidate(t, TemporalAnchor(i, i), frozenset({"bob"}), frozenset(), 1, 1, "s")
            for i, t in enumerate(texts)]


def test_canonicalize_key_collision():
    res = canonicalize(_cands("Bob moved to Miami.", "bob moved to Miami"), {}, iter(["F1", "F2"]).__next__)
    assert len(res.new_facts) == 1 and len(res.merge_log) == 1


def test_canonicalize_distinct_keys():
    res = canonicalize(_cands("Bob moved to Davis.", "Bob moved to Miami."), {}, iter(["F1", "F2"]).__next__)
    assert len(res.new_facts) == 2 and not res.merge_log


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["Bob moved.", "bob moved", "Ann ran far.", "ann ran far!", "Cy sang loud."]),
                max_size=12))
def test_canonicalize_conserves_candidates_and_is_idempotent(texts):
    ids = iter(f"F{i}" for i in range(100))
    res = canonicalize(_cands(*texts), {}, ids.__next__)
    assert len(res.new_facts) + len(res.merge_log) == len(texts) - len(res.skipped)
    existing = {f.canonical_key: f for f in res.new_facts}
    again = canonicalize([], existing, ids.__next__)
    assert not again.new_facts and not again.updated_facts


def test_duplicate_fact_gains_source_ref():
    store = MemoryStore()
    be = Backends.mock()
    s1 = bob_sessions()[0]
    ingest_session(store, s1, be)
    n = len(store.facts)
    twin = Session.from_json(s1.to_json() | {"session_id": "bob-again"}, arrival_seq=99)
    rep = ingest_session(store, twin, be)
    assert rep.facts == 0 and rep.updated_facts == 1
    assert len(store.facts) == n
    (fact,) = store.facts.values()
    assert {r.session_id for r in fact.source_refs} == {"bob-2023-05", "bob-again"}


def test_empty_candidate_session_is_noop():
    store = MemoryStore()
    s = Session.from_json({"session_id": "q", "timestamp": "2024-01-01",
                           "turns": [{"role": "user", "content": "ok"}, {"role": "assistant", "content": "thanks"}]})
    rep = ingest_session(store, s, Backends.mock())
    assert rep.facts == 0 and rep.trees_touched == []
    assert not store.trees


def test_bob_july_session_touches_entity_and_scene_trees():
    store = MemoryStore()
    be = Backends.mock()
    sessions = bob_sessions()
    for s in sessions[:-2]:
        ingest_session(store, s, be)
    rep = ingest_session(store, sessions[-2], be)
    touched_scopes = {store.trees[t].scope for t in rep.trees_touched}
    assert ScopeId("entity", "bob") in touched_scopes
    assert any(s.family == "scene" for s in touched_scopes)


def test_facts_are_queryable_after_each_ingest():
    from memforest.retrieval import retrieve

    store = MemoryStore()
    be = Backends.mock()
    s1, s2 = random_sessions(random.Random(11), 2)
    ingest_session(store, s1, be)
    assert not store.dirty and retrieve("anything", store, be, "flat").evidence
    ingest_session(store, s2, be)
    assert not store.dirty


def test_ingest_twice_raises():
    store = MemoryStore()
    s = bob_sessions()[0]
    ingest_session(store, s, Backends.mock())
    with pytest.raises(AlreadyIngested):
        ingest_session(store, s, Backends.mock())


def test_abort_policy_writes_nothing():
    store = MemoryStore(MemForestConfig(chunk_error_policy="abort"))
    with pytest.raises(IngestError):
        ingest_session(store, _session(6), Backends.mock(extractor=FailOn(1)))
    assert not store.sessions and not store.facts and not store.trees


def test_registry_lists_exactly_new_artifacts():
    store = MemoryStore()
    be = Backends.mock()
    s1, s2 = random_sessions(random.Random(2), 2)
    ingest_session(store, s1, be)
    facts0, cells0 = set(store.facts), set(store.cells)
    rep = ingest_session(store, s2, be)
    art = store.registry.lookup(s2.session_id)
    new_or_updated = (set(store.facts) - facts0) | {f for f in facts0 if s2.session_id in store.facts[f].session_ids}
    assert art.fact_ids == new_or_updated
    assert art.cell_ids == set(store.cells) - cells0
    assert art.tree_ids == set(rep.trees_touched)


def test_longmemeval_adapter():
    data = {"haystack_session_ids": ["a", "b"], "haystack_dates": ["2023/05/20 (Sat) 02:21", "2023/05/21 (Sun) 09:00"],
            "haystack_sessions": [[{"role": "user", "content": "Hi"}], [{"role": "user", "content": "Yo"}]]}
    ss = sessions_from_json(data)
    assert [s.session_id for s in ss] == ["a", "b"] and [s.arrival_seq for s in ss] == [0, 1]
