import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memforest.backends import Backends
from memforest.memtree import MemTree, ceil_log, dependency_depth, flush, insert_leaf, mark_dirty_ancestors
from memforest.substrate import IdAllocator, PayloadRef, RoutedRecord, ScopeId, TemporalAnchor
from oracles import multi_child_internal_nodes, tree_violations

DAY = 86_400


def new_tree(k=4, family="entity"):
    return MemTree("T1", ScopeId(family, "x"), k, IdAllocator().factory("N"))


def text_of(p):
    return f"Fact {p.id} happened."


def add(tree, i, ts=None):
    return tree.insert(PayloadRef("fact", f"F{i:05d}"), TemporalAnchor.point(i * DAY if ts is None else ts, "day"))


def test_first_insert_gives_height_one():
    t = new_tree()
    add(t, 0)
    assert t.height == 1 and t.leaf_count == 1 and not tree_violations(t)


def test_k2_four_inserts():
    t = new_tree(k=2)
    for i in range(4):
        add(t, i)
    assert t.height <= 3 and not tree_violations(t)


def test_later_fact_becomes_temporal_successor():
    t = new_tree()
    davis = add(t, 0, ts=1_684_000_000)
    miami = add(t, 1, ts=1_721_000_000)
    leaves = list(t.iter_leaves())
    assert leaves.index(miami) == leaves.index(davis) + 1


def test_insert_leaf_checks_scope_and_updates_placement():
    from memforest.substrate import PlacementMap

    t = new_tree()
    pm = PlacementMap()
    rec = RoutedRecord(t.scope, PayloadRef("fact", "F1"), TemporalAnchor.point(0))
    lid = insert_leaf(t, rec, pm)
    assert pm.get(rec.payload) == {("T1", lid)}
    with pytest.raises(ValueError):
        insert_leaf(t, RoutedRecord(ScopeId("entity", "y"), rec.payload, rec.anchor))


def test_sibling_inserts_share_a_parent_once():
    t = new_tree(k=8)
    for i in range(4):
        add(t, i)
    flush([t], Backends.mock(), text_of)
    a, b = add(t, 10), add(t, 11)
    assert a.parent is b.parent
    assert list(t.pending).count(a.parent.node_id) == 1


def test_mark_dirty_ancestors_bounds_and_coalesces():
    t = new_tree(k=3)
    for i in range(30):
        add(t, i)
    flush([t], Backends.mock(), text_of)
    leaf = next(t.iter_leaves())
    newly = mark_dirty_ancestors(t, leaf.node_id)
    assert 1 <= len(newly) <= t.height
    assert mark_dirty_ancestors(t, leaf.node_id) == set()


def test_flush_four_new_leaves_in_height_two_tree_costs_one_call():
    t = new_tree(k=8)
    be = Backends.mock()
    for i in range(4):
        add(t, i)
    stats = flush([t], be, text_of)
    assert t.height == 2
    assert stats.summarizer_calls == 1 == be.ledger.calls("summarizer")


def test_flush_with_nothing_dirty_is_free():
    t = new_tree()
    be = Backends.mock()
    stats = flush([t], be, text_of)
    assert stats.summarizer_calls == stats.embedder_calls == stats.depth == 0
    assert be.ledger.total_calls() == 0


def test_lazy_never_exceeds_eager():
    lazy_t, eager_t = new_tree(k=4), new_tree(k=4)
    lazy_be, eager_be = Backends.mock(), Backends.mock()
    for i in range(40):
        add(lazy_t, i)
        add(eager_t, i)
        flush([eager_t], eager_be, text_of)
    flush([lazy_t], lazy_be, text_of)
    assert lazy_be.ledger.calls("summarizer") < eager_be.ledger.calls("summarizer")
    assert lazy_be.ledger.calls("summarizer") == multi_child_internal_nodes(lazy_t)


def test_out_of_order_batch_ends_sorted():
    t = new_tree(k=3)
    order = list(range(50))
    random.Random(4).shuffle(order)
    for i in order:
        add(t, i)
    assert [l.payload.id for l in t.iter_leaves()] == [f"F{i:05d}" for i in range(50)]


def test_single_insert_depth_bounded_by_log():
    t = new_tree(k=4)
    for i in range(64):
        add(t, i)
    flush([t], Backends.mock(), text_of)
    add(t, 64)
    stats = flush([t], Backends.mock(), text_of)
    assert dependency_depth(stats) <= ceil_log(4, 65)


def test_batch_over_many_paths_keeps_depth():
    rng = random.Random(1)
    t = new_tree(k=4)
    for i in range(256):
        add(t, i * 10)
    flush([t], Backends.mock(), text_of)
    add(t, 9999, ts=1235 * DAY)
    one = flush([t], Backends.mock(), text_of).depth
    for j in range(10):
        add(t, 20_000 + j, ts=rng.randrange(0, 2560) * DAY)
    many = flush([t], Backends.mock(), text_of).depth
    assert many == one


def test_single_child_nodes_pass_summary_through():
    t = new_tree(k=2)
    add(t, 0)
    add(t, 1)
    add(t, 2)  # right-edge split leaves a lone child somewhere above
    flush([t], Backends.mock(), text_of)
    for n in t.nodes.values():
        if n.level > 0 and len(n.children) == 1:
            assert n.summary == n.children[0].summary


def test_summarizer_failure_leaves_nodes_dirty():
    class Flaky:
        def summarize(self, texts, interval=None):
            raise RuntimeError("down")

    t = new_tree(k=2)
    for i in range(4):
        add(t, i)
    stats = flush([t], Backends.mock(summarizer=Flaky()), text_of)
    assert stats.partial and t.pending and not t.check()
    flush([t], Backends.mock(), text_of)
    assert not t.pending


ops = st.lists(st.tuples(st.sampled_from(["ins", "ins", "ins", "del", "move"]), st.integers(0, 10**6)),
               min_size=1, max_size=120)


@settings(max_examples=150, deadline=None)
@given(st.sampled_from([2, 3, 4, 8]), ops)
def test_random_edit_sequences_keep_invariants(k, seq):
    t = new_tree(k=k)
    live = []
    n = 0
    for op, x in seq:
        if op == "ins" or not live:
            live.append(add(t, n, ts=x))
            n += 1
        elif op == "del":
            t.remove(live.pop(x % len(live)))
        else:
            t.move(live[x % len(live)], TemporalAnchor.point(x * 7, "day"))
        assert not tree_violations(t), (op, x)
    assert not t.check()
    assert t.leaf_count == len(live)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 4, 8]), st.integers(1, 300))
def test_flush_leaves_everything_clean_and_consistent(k, n):
    t = new_tree(k=k)
    for i in range(n):
        add(t, i)
    stats = flush([t], Backends.mock(), text_of)
    assert not t.pending and not t.check()
    assert stats.summarizer_calls == multi_child_internal_nodes(t)
    assert t.height == ceil_log(k, n) + 1


def test_clone_preserves_structure_under_new_ids():
    t = new_tree(k=3)
    for i in range(20):
        add(t, i)
    flush([t], Backends.mock(), text_of)
    c, idmap = t.clone("T9", IdAllocator({"N": 1000}).factory("N"))
    assert [l.payload for l in c.iter_leaves()] == [l.payload for l in t.iter_leaves()]
    assert c.root.summary == t.root.summary and not c.check()
    assert set(idmap) == set(t.nodes) and not set(idmap.values()) & set(t.nodes)


@pytest.mark.parametrize("k", [2, 4])
def test_back_dated_inserts_into_packed_tree_stay_local(k):
    n = k ** (10 if k == 2 else 5)
    t = new_tree(k=k)
    for i in range(n):
        add(t, i)
    flush([t], Backends.mock(), text_of)
    rng = random.Random(k)
    for j in range(16):
        add(t, n + j, ts=rng.randrange(0, n) * DAY + 1)
    stats = flush([t], Backends.mock(), text_of)
    assert not tree_violations(t)
    assert stats.summarizer_calls <= 16 * (2 * t.height - 1) < n // 2
