"""Store builders shared by several test modules."""

from memforest.backends import Backends
from memforest.ingest import ingest_session
from memforest.store import MemoryStore
from memforest.synth import bob_chooser_script, bob_embedding_overrides, bob_planner_script


def bob_backends():
    from memforest.backends.mock import ScriptedChooser, ScriptedPlanner

    return Backends.mock(overrides=bob_embedding_overrides(),
                         planner=ScriptedPlanner(bob_planner_script()),
                         chooser=ScriptedChooser(bob_chooser_script()))


def build_store(sessions, backends=None, store=None):
    store = store or MemoryStore()
    be = backends or Backends.mock()
    for s in sessions:
        ingest_session(store, s, be)
    return store


def node_summaries(store):
    return {(tid, nid): n.summary for tid, t in store.trees.items() for nid, n in t.nodes.items()}


def persistent_state(store):
    """Facts, placement and registry in comparable form."""
    facts = {fid: f.to_json() for fid, f in store.facts.items()}
    return facts, store.placement.as_dict(), {sid: a.to_json() for sid, a in store.registry.items()}


def leaf_payloads(store):
    return {str(t.scope): sorted(str(l.payload) for l in t.iter_leaves()) for t in store.trees.values()}


def fact_texts(store):
    from collections import Counter

    return Counter(f.canonical_key for f in store.facts.values())
