import random

import numpy as np
import pytest

from memforest.backends import Backends, RootView
from memforest.backends.mock import MockPlanner, ScriptedChooser
from memforest.config import ConfigError
from memforest.ingest import ingest_session
from memforest.memtree import MemTree, flush
from memforest.retrieval import (MODES, NotFlushed, browse_embedding, browse_llm, combine, forest_recall,
                                 plan_subqueries, retrieve)
from memforest.store import MemoryStore
from memforest.substrate import IdAllocator, PayloadRef, ScopeId, Session, TemporalAnchor
from memforest.synth import BOB_DAVIS, BOB_QUERY, bob_sessions, random_sessions
from helpers import bob_backends, build_store

DAY = 86_400


def _tree(n, k=2):
    t = MemTree("T1", ScopeId("entity", "x"), k, IdAllocator().factory("N"))
    for i in range(n):
        t.insert(PayloadRef("fact", f"F{i}"), TemporalAnchor.point(i * DAY, "day"))
    flush([t], Backends.mock(), lambda p: f"Leaf {p.id} text.")
    return t


def _e(i, d=16):
    v = np.zeros(d)
    v[i] = 1.0
    return v


@pytest.mark.parametrize("combiner, want", [("max", 0.7), ("mean", 0.5), ("weighted", 0.3 * 0.25 + 0.7 * 0.75)])
def test_combine(combiner, want):
    assert combine(0.3, 0.7, combiner, alpha=0.25) == pytest.approx(want)


def test_combine_missing_fact_score():
    assert combine(0.4, None, "max") == 0.4
    assert combine(0.4, None, "mean") == 0.2


def test_single_tree_store_recalls_with_both():
    s = Session.from_json({"session_id": "a", "timestamp": "2024-01-01",
                           "turns": [{"role": "user", "content": "Zed likes tea."}]})
    store = MemoryStore()
    be = Backends.mock()
    ingest_session(store, s, be)
    (entity_tree,) = [t for t in store.trees.values() if t.family == "entity"]
    cands = forest_recall(be.embed("Zed likes tea."), store)
    by_id = {c.tree_id: c for c in cands}
    assert by_id[entity_tree.tree_id].provenance == "both"


def test_off_topic_root_recalled_through_fact(small_store):
    store, be = small_store, Backends.mock()
    for fid in sorted(store.facts):
        q = be.embed(store.facts[fid].text)
        best_root = store.root_index.search(q, 1)[0][0]
        trees = store.placement.trees_of(PayloadRef("fact", fid)) - {best_root}
        if trees:
            break
    cands = {c.tree_id: c for c in forest_recall(q, store, k_root=1, k_fact=1, k_trees=50)}
    for tid in trees:
        assert cands[tid].provenance == "fact" and cands[tid].fact_score == pytest.approx(1.0)


def test_tied_trees_order_by_id():
    s = Session.from_json({"session_id": "a", "timestamp": "2024-01-01",
                           "turns": [{"role": "user", "content": "Ann met Cy."}]})
    store = MemoryStore()
    be = Backends.mock()
    ingest_session(store, s, be)
    cands = forest_recall(be.embed("Ann met Cy."), store, k_trees=10)
    top = [c for c in cands if c.score == cands[0].score]
    assert len(top) >= 2 and [c.tree_id for c in top] == sorted(c.tree_id for c in top)


def test_browse_height_one_returns_leaf():
    t = _tree(1)
    tr = browse_embedding(t, _e(0), 2, 10)
    assert [n for n, _ in tr.leaves] == [t.root.node_id]


def test_browse_beam_one_follows_monotone_path():
    t = _tree(16, k=2)
    target = list(t.iter_leaves())[11]
    on_path = {target.node_id, *(a.node_id for a in target.ancestors())}
    for n in t.nodes.values():
        n.embedding = _e(0) if n.node_id in on_path else _e(1)
    tr = browse_embedding(t, _e(0), beam_width=1, leaf_budget=1)
    assert tr.leaves[0][0] == target.node_id


def test_browse_full_expansion_returns_all_leaves():
    t = _tree(27, k=3)
    tr = browse_embedding(t, np.ones(16) / 4, beam_width=3, leaf_budget=27)
    assert {n for n, _ in tr.leaves} == {l.node_id for l in t.iter_leaves()}


def test_browse_llm_replays_script():
    t = _tree(8, k=2)
    script = {"q": [[1], [0], [1]]}
    be = Backends.mock(chooser=ScriptedChooser(script))
    tr = browse_llm(t, "q", _e(0), be, beam_width=1, leaf_budget=5)
    want = t.root.children[1].children[0].children[1]
    assert [s["choice"] for s in tr.steps] == [[1], [0], [1]]
    assert tr.leaves == [(want.node_id, pytest.approx(float(want.embedding @ _e(0))))]
    assert tr.fallback is None


def test_browse_llm_out_of_range_choice_falls_back():
    t = _tree(3, k=3)
    be = Backends.mock(chooser=ScriptedChooser({"q": [[99]]}))
    tr = browse_llm(t, "q", _e(0), be, beam_width=1)
    assert tr.steps[0]["fallback"] == "embedding" and tr.fallback == "invalid-choice"
    assert len(tr.leaves) == 1


def test_browse_llm_chooser_error_uses_embedding():
    class Down:
        def choose(self, *a):
            raise RuntimeError("down")

    t = _tree(9, k=3)
    tr = browse_llm(t, "q", _e(0), Backends.mock(chooser=Down()))
    assert tr.fallback == "chooser-error" and tr.leaves


def test_bob_residence_tree_reaches_davis(bob_store):
    store, be = bob_store
    bob = store.trees[store.scope_tree[ScopeId("entity", "bob")]]
    tr = browse_llm(bob, "residence immediately before the Miami move", be.embed(BOB_QUERY), be)
    texts = [store.payload_text(bob.nodes[n].payload) for n, _ in tr.leaves]
    assert BOB_DAVIS in texts


def test_planner_disabled_is_identity():
    views = [RootView("T1", "entity:a", "a", "s"), RootView("T2", "entity:b", "b", "s")]
    subs, failed = plan_subqueries("q", views, Backends.mock(planner=None))
    assert subs == {"T1": "q", "T2": "q"} and not failed


def test_planner_templates_per_tree_with_one_call():
    views = [RootView(f"T{i}", f"entity:{c}", c, "s") for i, c in enumerate("abc")]
    be = Backends.mock(planner=MockPlanner())
    subs, _ = plan_subqueries("where?", views, be)
    assert subs == {"T0": "within a: where?", "T1": "within b: where?", "T2": "within c: where?"}
    assert be.ledger.calls("planner") == 1


def test_retrieve_on_empty_store():
    for mode in MODES:
        ctx = retrieve("q", MemoryStore(), Backends.mock(), mode)
        assert not ctx.evidence and not ctx.candidates


def test_flat_finds_global_best(small_store):
    fid = sorted(small_store.facts)[3]
    text = small_store.facts[fid].text
    ctx = retrieve(text, small_store, Backends.mock(), "flat")
    assert ctx.evidence[0].payload == PayloadRef("fact", fid)


def test_bob_flat_misses_davis_but_planner_browse_finds_it():
    be = bob_backends()
    store = build_store(bob_sessions(), be)
    flat = retrieve(BOB_QUERY, store, bob_backends(), "flat")
    assert len(flat.evidence) == 10 and BOB_DAVIS not in flat.texts()
    deep = retrieve(BOB_QUERY, store, bob_backends(), "llm+planner")
    assert BOB_DAVIS in deep.texts()


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_returns_live_bounded_evidence(small_store, mode):
    ctx = retrieve("Alice moved to Boston", small_store, Backends.mock(), mode)
    assert len(ctx.evidence) <= small_store.config.retrieval.final_top_k
    for ev in ctx.evidence:
        if ev.payload.kind in ("fact", "cell"):
            assert ev.payload in small_store.placement


def test_dirty_store_refuses_queries(small_store):
    tree = next(iter(small_store.trees.values()))
    tree.touch_leaf(next(tree.iter_leaves()))
    with pytest.raises(NotFlushed):
        retrieve("q", small_store, Backends.mock(), "emb")


def test_unknown_mode_rejected(small_store):
    with pytest.raises(ConfigError):
        retrieve("q", small_store, Backends.mock(), "psychic")
