import math
import random

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from memforest.backends import Backends
from memforest.router import SceneState, assign_scene, route
from memforest.substrate import CanonicalFact, DialogueCell, IdAllocator, Mention, ScopeId, TemporalAnchor
from memforest.synth import random_sessions
from helpers import build_store


def fact(fid, text, entities=(), topics=()):
    m = Mention("s1", 1, 2, text, TemporalAnchor.point(0), frozenset(entities), frozenset(topics))
    return CanonicalFact.from_mentions(fid, [m])


def unit(*xs):
    v = np.array(xs + (0.0,) * (4 - len(xs)), dtype=float)
    return v / np.linalg.norm(v)


def test_route_fans_out_per_entity_plus_one_scene():
    cells = [DialogueCell("C1", "s1", 1, 2, TemporalAnchor.point(0), "x")]
    ids = IdAllocator().factory("S")
    be = Backends.mock()
    recs = route(fact("F1", "Bob moved.", ["bob"]), cells, SceneState(), be, ids)
    fams = sorted(r.scope.family for r in recs)
    assert fams == ["entity", "scene", "session"]
    assert ScopeId("entity", "bob") in {r.scope for r in recs}
    recs2 = route(fact("F2", "Bob moved to Miami.", ["bob", "miami"]), [], SceneState(), be, ids)
    assert {r.scope.key for r in recs2 if r.scope.family == "entity"} == {"bob", "miami"}


def test_degenerate_fact_still_gets_a_scene():
    cells = [DialogueCell("C1", "s1", 1, 2, TemporalAnchor.point(0), "x")]
    recs = route(fact("F1", "it rained a lot"), cells, SceneState(), Backends.mock(), IdAllocator().factory("S"))
    assert sorted(r.scope.family for r in recs) == ["scene", "session"]


def test_first_fact_seeds_and_identical_fact_joins():
    st_ = SceneState(0.6)
    ids = IdAllocator().factory("S")
    c1, st_ = assign_scene(fact("F1", "a"), st_, unit(1, 0), ids)
    assert np.allclose(st_.clusters[c1].centroid, unit(1, 0))
    c2, st_ = assign_scene(fact("F2", "b"), st_, unit(1, 0), ids)
    assert c1 == c2 and len(st_) == 1


def test_threshold_straddle():
    theta, eps = 0.6, 1e-3
    below = unit(theta - eps, math.sqrt(1 - (theta - eps) ** 2))
    above = unit(theta + eps, math.sqrt(1 - (theta + eps) ** 2))
    for vec, joins in ((below, False), (above, True)):
        s = SceneState(theta)
        ids = IdAllocator().factory("S")
        c1 = s.assign(fact("F1", "a"), unit(1, 0), ids)
        c2 = s.assign(fact("F2", "b"), vec, ids)
        assert (c1 == c2) is joins


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1),
                min_size=1, max_size=25))
def test_centroids_are_normalized_member_means(vecs):
    s = SceneState(0.6)
    ids = IdAllocator().factory("S")
    for i, v in enumerate(vecs):
        s.assign(fact(f"F{i}", f"t{i}"), unit(*v), ids)
    assert not s.check()
    for c in s.clusters.values():
        m = np.mean([c.members[f] for f in sorted(c.members)], axis=0)
        if np.linalg.norm(m) > 1e-9:
            assert np.allclose(c.centroid, m / np.linalg.norm(m), atol=1e-9)
    assert sum(len(c.members) for c in s.clusters.values()) == len(vecs)


def test_routing_never_calls_a_language_model():
    from memforest.router import route_session

    be = Backends.mock()
    store = build_store(random_sessions(random.Random(8), 5), be)
    before = be.ledger.snapshot()
    facts = [fact(f"FX{i}", f"Quinn visited Oslo number {i}.", ["quinn", "oslo"]) for i in range(5)]
    for f in facts:
        store.put_fact(f)
    route_session(store, facts, [], be)
    after = be.ledger.snapshot()
    used = {p for p in after if after[p]["calls"] != before[p]["calls"]}
    assert used == {"embedder"}
    assert not store.scenes.check()


def test_embedding_failure_defers_scene_then_retries():
    class Down:
        def embed(self, text):
            raise RuntimeError("down")

    s = SceneState()
    f = fact("F1", "Bob moved.", ["bob"])
    recs = route(f, [], s, Backends.mock(embedder=Down()), IdAllocator().factory("S"))
    assert "F1" in s.pending and all(r.scope.family != "scene" for r in recs)
