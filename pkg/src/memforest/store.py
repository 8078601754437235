"""The memory store: persistent substrate plus the derived forest and indexes."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .config import MemForestConfig
from .index import EmbeddingIndex
from .memtree import FlushStats, MemTree, flush as flush_trees
from .router import SceneState
from .substrate import (
    CanonicalFact,
    DialogueCell,
    IdAllocator,
    PayloadRef,
    PlacementMap,
    RoutedRecord,
    ScopeId,
    Session,
    SessionArtifacts,
    SessionRegistry,
)

logger = logging.getLogger(__name__)


class StoreError(RuntimeError):
    pass


class MemoryStore:
    """Sessions, facts and cells (persistent) and trees, scenes and indexes (derived).

    Every mutation of a fact goes through :meth:`put_fact`,
    :meth:`replace_fact` or :meth:`remove_fact` so tree leaves, the placement
    map and the FactIndex stay in step with the substrate.
    """

    def __init__(self, config: MemForestConfig | None = None):
        self.config = config or MemForestConfig()
        self.ids = IdAllocator()
        self.sessions: dict[str, Session] = {}
        self.facts: dict[str, CanonicalFact] = {}
        self._by_key: dict[str, str] = {}
        self.cells: dict[str, DialogueCell] = {}
        self.trees: dict[str, MemTree] = {}
        self.scope_tree: dict[ScopeId, str] = {}
        self.placement = PlacementMap()
        self.registry = SessionRegistry()
        self.scenes = SceneState(self.config.theta_scene)
        self.fact_index = EmbeddingIndex("facts")
        self.node_index = EmbeddingIndex("nodes")
        self.root_index = EmbeddingIndex("roots")
        self.arrivals = 0

    # -- substrate ---------------------------------------------------------

    def facts_by_key(self) -> dict[str, CanonicalFact]:
        return {k: self.facts[fid] for k, fid in self._by_key.items()}

    def fact_for_key(self, key: str) -> CanonicalFact | None:
        fid = self._by_key.get(key)
        return None if fid is None else self.facts[fid]

    def add_session(self, session: Session) -> Session:
        session = replace(session, arrival_seq=self.arrivals)
        self.arrivals += 1
        self.sessions[session.session_id] = session
        return session

    def add_cell(self, cell: DialogueCell) -> None:
        self.cells[cell.cell_id] = cell

    def put_fact(self, fact: CanonicalFact) -> None:
        if fact.canonical_key in self._by_key and self._by_key[fact.canonical_key] != fact.fact_id:
            raise StoreError(f"canonical key {fact.canonical_key!r} already belongs to "
                             f"{self._by_key[fact.canonical_key]}")
        self.facts[fact.fact_id] = fact
        self._by_key[fact.canonical_key] = fact.fact_id

    def replace_fact(self, old: CanonicalFact, new: CanonicalFact) -> None:
        """Swap in an updated fact and re-sync every leaf that shows it."""
        self.put_fact(new)
        ref = PayloadRef("fact", new.fact_id)
        gone = {ScopeId("entity", e) for e in old.entities - new.entities}
        for tree_id, leaf_id in sorted(self.placement.get(ref)):
            tree = self.trees[tree_id]
            if tree.scope in gone:
                self._remove_leaf(ref, tree_id, leaf_id)
                continue
            leaf = tree.nodes[leaf_id]
            if leaf.interval != new.anchor:
                tree.move(leaf, new.anchor)
            if new.text != old.text:
                tree.touch_leaf(leaf)
        self.scenes.update_member(new, old, None)

    def remove_fact(self, fact: CanonicalFact) -> None:
        ref = PayloadRef("fact", fact.fact_id)
        for tree_id, leaf_id in sorted(self.placement.get(ref)):
            self._remove_leaf(ref, tree_id, leaf_id)
        self.scenes.remove(fact)
        self.fact_index.delete(fact.fact_id)
        self.facts.pop(fact.fact_id, None)
        if self._by_key.get(fact.canonical_key) == fact.fact_id:
            del self._by_key[fact.canonical_key]

    def remove_cell(self, cell_id: str) -> None:
        ref = PayloadRef("cell", cell_id)
        for tree_id, leaf_id in sorted(self.placement.get(ref)):
            self._remove_leaf(ref, tree_id, leaf_id)
        self.cells.pop(cell_id, None)

    def _remove_leaf(self, ref: PayloadRef, tree_id: str, leaf_id: str) -> None:
        tree = self.trees[tree_id]
        tree.remove(tree.nodes[leaf_id])
        self.placement.remove(ref, tree_id, leaf_id)

    def ensure_fact_vector(self, fact: CanonicalFact, backends) -> np.ndarray | None:
        """FactIndex vector for the fact's current text, embedding it if needed (None on failure)."""
        row = self.fact_index.get(fact.fact_id)
        if row is not None and row.text == fact.text:
            return row.vector
        try:
            vec = backends.embed(fact.text)
        except Exception as exc:
            logger.warning("embedding fact %s failed: %s", fact.fact_id, exc)
            self.fact_index.delete(fact.fact_id)
            return None
        self.fact_index.put(fact.fact_id, fact.fact_id, vec, fact.text)
        if fact.fact_id in self.scenes.fact_scene:
            self.scenes.update_member(fact, fact, vec)
        return vec

    def payload_text(self, payload: PayloadRef) -> str:
        if payload.kind == "fact":
            return self.facts[payload.id].text
        return self.cells[payload.id].text

    def payload_anchor(self, payload: PayloadRef):
        return self.facts[payload.id].anchor if payload.kind == "fact" else self.cells[payload.id].anchor

    def register(self, session_id: str, fact_ids, cell_ids) -> SessionArtifacts:
        trees = set()
        for fid in fact_ids:
            trees |= self.placement.trees_of(PayloadRef("fact", fid))
        for cid in cell_ids:
            trees |= self.placement.trees_of(PayloadRef("cell", cid))
        art = SessionArtifacts(frozenset(fact_ids), frozenset(cell_ids), frozenset(trees))
        self.registry.set(session_id, art)
        return art

    # -- forest ------------------------------------------------------------

    def tree_for(self, scope: ScopeId, create: bool = False) -> MemTree | None:
        tid = self.scope_tree.get(scope)
        if tid is not None:
            return self.trees[tid]
        if not create:
            return None
        tree = MemTree(self.ids.next("T"), scope, self.config.tree.k_for(scope.family), self.ids.factory("N"))
        self.trees[tree.tree_id] = tree
        self.scope_tree[scope] = tree.tree_id
        return tree

    def insert(self, record: RoutedRecord) -> str | None:
        tree = self.tree_for(record.scope, create=True)
        if self.placement.leaf_in(record.payload, tree.tree_id) is not None:
            return None
        leaf = tree.insert(record.payload, record.anchor)
        self.placement.add(record.payload, tree.tree_id, leaf.node_id)
        return leaf.node_id

    def dirty_trees(self) -> list[MemTree]:
        return [t for t in self.trees.values() if t.pending or t.touched or t.dropped]

    @property
    def dirty(self) -> bool:
        return bool(self.dirty_trees()) or bool(self.scenes.pending)

    def retry_deferred(self, backends) -> int:
        """Give facts whose scene assignment was deferred another embedding attempt."""
        placed = 0
        for fid in sorted(self.scenes.pending):
            fact = self.facts.get(fid)
            if fact is None:
                self.scenes.pending.discard(fid)
                continue
            vec = self.ensure_fact_vector(fact, backends)
            if vec is None:
                continue
            cid = self.scenes.assign(fact, vec, self.ids.factory("S"))
            self.insert(RoutedRecord(ScopeId("scene", cid), PayloadRef("fact", fid), fact.anchor))
            placed += 1
        return placed

    def flush(self, backends, parallelism: int | None = None) -> FlushStats:
        if self.scenes.pending:
            self.retry_deferred(backends)
        trees = self.dirty_trees()
        stats = flush_trees(trees, backends, self.payload_text,
                            parallelism or self.config.flush_parallelism,
                            node_index=self.node_index, root_index=self.root_index)
        for t in trees:
            if t.root is None:
                self.drop_tree(t.tree_id)
        return stats

    def drop_tree(self, tree_id: str) -> None:
        tree = self.trees.pop(tree_id)
        self.scope_tree.pop(tree.scope, None)
        for nid in tree.nodes:
            self.node_index.delete(nid)
        for nid in tree.dropped:
            self.node_index.delete(nid)
        self.root_index.delete(tree_id)
        for leaf in list(tree.iter_leaves()):
            self.placement.remove(leaf.payload, tree_id, leaf.node_id)

    # -- views -------------------------------------------------------------

    def tree_topic(self, tree: MemTree) -> str:
        if tree.family == "scene":
            c = self.scenes.clusters.get(tree.scope.key)
            return c.label if c else tree.scope.key
        return tree.scope.key

    def stats(self) -> dict:
        fams: dict[str, dict] = {}
        for t in self.trees.values():
            f = fams.setdefault(t.family, {"trees": 0, "leaves": 0, "nodes": 0, "max_height": 0})
            f["trees"] += 1
            f["leaves"] += t.leaf_count
            f["nodes"] += len(t.nodes)
            f["max_height"] = max(f["max_height"], t.height)
        return {
            "sessions": len(self.sessions),
            "facts": len(self.facts),
            "cells": len(self.cells),
            "scene_clusters": len(self.scenes),
            "deferred_scene": len(self.scenes.pending),
            "trees": dict(sorted(fams.items())),
            "dirty_nodes": sum(len(t.pending) for t in self.trees.values()),
            "index_rows": {"facts": len(self.fact_index), "nodes": len(self.node_index),
                           "roots": len(self.root_index)},
        }

    def check(self) -> list[str]:
        """Cross-structure consistency scan (used by tests and ``stats --check``)."""
        errs: list[str] = []
        seen = PlacementMap()
        for tid, tree in self.trees.items():
            errs += tree.check()
            if self.scope_tree.get(tree.scope) != tid:
                errs.append(f"scope {tree.scope} does not map back to {tid}")
            for leaf in tree.iter_leaves():
                seen.add(leaf.payload, tid, leaf.node_id)
                known = self.facts if leaf.payload.kind == "fact" else self.cells
                if leaf.payload.id not in known:
                    errs.append(f"leaf {leaf.node_id} in {tid} points at missing {leaf.payload}")
                elif leaf.interval != self.payload_anchor(leaf.payload):
                    errs.append(f"leaf {leaf.node_id} anchor out of sync with {leaf.payload}")
        if seen != self.placement:
            errs.append("placement map disagrees with tree leaves")
        for key, fid in self._by_key.items():
            if fid not in self.facts or self.facts[fid].canonical_key != key:
                errs.append(f"canonical key index broken for {key!r}")
        if len(self._by_key) != len(self.facts):
            errs.append("canonical key index size mismatch")
        errs += self.scenes.check()
        for fid, fact in self.facts.items():
            ref = PayloadRef("fact", fid)
            if fid not in self.scenes.pending and not self.placement.trees_of(ref):
                errs.append(f"fact {fid} is in no tree")
            if fact.entities and fid not in self.scenes.pending:
                for e in fact.entities:
                    tid = self.scope_tree.get(ScopeId("entity", e))
                    if tid is None or self.placement.leaf_in(ref, tid) is None:
                        errs.append(f"fact {fid} missing from entity tree {e!r}")
        if not self.dirty:
            want_nodes = {nid for t in self.trees.values() for nid in t.nodes}
            if set(self.node_index.keys()) != want_nodes:
                errs.append("node index rows differ from live nodes")
            if set(self.root_index.keys()) != set(self.trees):
                errs.append("root index rows differ from live trees")
        return errs
