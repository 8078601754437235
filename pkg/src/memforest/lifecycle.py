"""Post-build maintenance: merge two stores, delete a session, rematerialize under new settings.

Each operation edits the persistent layer first and then lets the ordinary
flush refresh whatever derived artifacts the edit invalidated.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .backends import ledger_delta
from .config import MemForestConfig
from .memtree import MemTree
from .substrate import CanonicalFact, DialogueCell, PayloadRef, ScopeId

logger = logging.getLogger(__name__)


class LifecycleError(RuntimeError):
    pass


class UnsupportedMigration(LifecycleError):
    pass


def _calls(before: dict, backends) -> dict[str, int]:
    return {p: d["calls"] for p, d in ledger_delta(backends.ledger.snapshot(), before).items()}


def _require_flushed(store, label: str) -> None:
    if store.dirty:
        raise LifecycleError(f"{label} has pending refresh work; flush it first")


# ---------------------------------------------------------------------------
# delete
# ---------------------------------------------------------------------------


@dataclass
class DeleteReport:
    session_id: str
    found: bool = True
    removed_facts: list[str] = field(default_factory=list)
    updated_facts: list[str] = field(default_factory=list)
    removed_cells: list[str] = field(default_factory=list)
    dropped_trees: list[str] = field(default_factory=list)
    invalidated: list[str] = field(default_factory=list)
    port_calls: dict[str, int] = field(default_factory=dict)
    flush: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def delete_session(store, session_id: str, backends) -> DeleteReport:
    """Remove a session's cells and its mentions; facts it alone supported go with it."""
    report = DeleteReport(session_id)
    if session_id not in store.sessions:
        logger.warning("delete: session %s is not in the store", session_id)
        report.found = False
        return report
    before = backends.ledger.snapshot()
    trees_before = set(store.trees)
    pending_before = {nid for t in store.trees.values() for nid in t.pending}
    art = store.registry.lookup(session_id)
    fact_ids = set(art.fact_ids) | {f.fact_id for f in store.facts.values() if session_id in f.session_ids}
    for fid in sorted(fact_ids):
        fact = store.facts.get(fid)
        if fact is None:
            continue
        left = fact.without_session(session_id)
        if left is None:
            store.remove_fact(fact)
            report.removed_facts.append(fid)
        else:
            store.replace_fact(fact, left)
            if left.text != fact.text:
                store.ensure_fact_vector(left, backends)
            report.updated_facts.append(fid)
    cells = set(art.cell_ids) | {c.cell_id for c in store.cells.values() if c.session_id == session_id}
    for cid in sorted(cells):
        store.remove_cell(cid)
        report.removed_cells.append(cid)
    del store.sessions[session_id]
    store.registry.remove(session_id)
    report.invalidated = sorted({nid for t in store.trees.values() for nid in t.pending} - pending_before)
    stats = store.flush(backends)
    report.dropped_trees = sorted(trees_before - set(store.trees))
    report.flush = stats.to_json()
    report.port_calls = _calls(before, backends)
    return report


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------


@dataclass
class MergeReport:
    facts_added: int = 0
    facts_reconciled: int = 0
    sessions_added: int = 0
    sessions_shared: int = 0
    trees_copied: int = 0
    trees_merged: int = 0
    leaves_inserted: int = 0
    scenes_matched: int = 0
    port_calls: dict[str, int] = field(default_factory=dict)
    flush: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def to_json(self, timings: bool = False) -> dict:
        out = dict(self.__dict__)
        if not timings:
            out.pop("wall_seconds")
        return out


def _session_equal(a, b) -> bool:
    return a.turns == b.turns


class _Merger:
    def __init__(self, dst, src, backends, report: MergeReport):
        self.dst, self.src, self.be, self.report = dst, src, backends, report
        self.fact_map: dict[str, str] = {}
        self.cell_map: dict[str, str] = {}
        self.scene_map: dict[str, str] = {}
        self.shared_sessions: set[str] = set()
        self.changed_facts: list[tuple[CanonicalFact, CanonicalFact]] = []

    def payload(self, p: PayloadRef) -> PayloadRef:
        return PayloadRef(p.kind, (self.fact_map if p.kind == "fact" else self.cell_map)[p.id])

    def sessions(self) -> None:
        dst, src = self.dst, self.src
        for sid in sorted(src.sessions, key=lambda s: (src.sessions[s].arrival_seq, s)):
            sess = src.sessions[sid]
            if sid in dst.sessions:
                if not _session_equal(dst.sessions[sid], sess):
                    raise LifecycleError(f"session {sid} differs between the two stores")
                self.shared_sessions.add(sid)
                self.report.sessions_shared += 1
            else:
                dst.add_session(sess)
                self.report.sessions_added += 1
        for cid in sorted(src.cells):
            cell = src.cells[cid]
            if cell.session_id in self.shared_sessions:
                twin = next((c for c in dst.cells.values() if c.session_id == cell.session_id
                             and (c.first_turn, c.last_turn) == (cell.first_turn, cell.last_turn)), None)
                if twin is not None:
                    self.cell_map[cid] = twin.cell_id
                    continue
            new = DialogueCell(dst.ids.next("C"), cell.session_id, cell.first_turn, cell.last_turn,
                               cell.text, cell.anchor)
            dst.add_cell(new)
            self.cell_map[cid] = new.cell_id

    def facts(self) -> None:
        dst, src = self.dst, self.src
        for fid in sorted(src.facts):
            fact = src.facts[fid]
            mine = dst.fact_for_key(fact.canonical_key)
            if mine is not None:
                self.fact_map[fid] = mine.fact_id
                merged = mine.with_mentions(mine.mentions + fact.mentions)
                if merged != mine:
                    self.changed_facts.append((mine, merged))
                self.report.facts_reconciled += 1
                continue
            new = CanonicalFact.from_mentions(dst.ids.next("F"), fact.mentions)
            dst.put_fact(new)
            self.fact_map[fid] = new.fact_id
            row = src.fact_index.get(fid)
            if row is not None and row.text == new.text:
                dst.fact_index.put(new.fact_id, new.fact_id, row.vector, new.text)
            self.report.facts_added += 1

    def scenes(self) -> None:
        dst, src = self.dst, self.src
        for cid, cluster in src.scenes.clusters.items():
            best, sim = dst.scenes.best(cluster.centroid)
            if best is not None and sim >= dst.scenes.theta:
                self.scene_map[cid] = best
                self.report.scenes_matched += 1
            else:
                self.scene_map[cid] = None  # allocated on first unplaced member
            for sfid in sorted(cluster.members):
                fid = self.fact_map[sfid]
                if fid in dst.scenes.fact_scene:
                    continue
                if self.scene_map[cid] is None:
                    self.scene_map[cid] = dst.ids.next("S")
                target = self.scene_map[cid]
                vec = dst.ensure_fact_vector(dst.facts[fid], self.be)
                if vec is None:
                    dst.scenes.pending.add(fid)
                    continue
                c = dst.scenes.clusters.get(target)
                if c is None:
                    from .router import SceneCluster
                    c = dst.scenes.clusters[target] = SceneCluster(target, vec.copy())
                c.members[fid] = np.asarray(vec, dtype=np.float64).copy()
                c.topics.update(dst.facts[fid].topics)
                dst.scenes.fact_scene[fid] = target
            if self.scene_map[cid] in dst.scenes.clusters:
                dst.scenes.clusters[self.scene_map[cid]].recompute()
        for fid in sorted(src.scenes.pending):
            dst.scenes.pending.add(self.fact_map[fid])

    def _target_scope(self, tree: MemTree) -> ScopeId | None:
        if tree.family == "scene":
            cid = self.scene_map.get(tree.scope.key)
            return None if cid is None else ScopeId("scene", cid)
        return tree.scope

    def _wanted(self, scope: ScopeId, payload: PayloadRef) -> bool:
        if scope.family == "scene":
            return self.dst.scenes.fact_scene.get(payload.id) == scope.key
        if scope.family == "entity":
            return scope.key in self.dst.facts[payload.id].entities
        return True

    def _adopt(self, tree: MemTree) -> None:
        dst = self.dst
        dst.trees[tree.tree_id] = tree
        dst.scope_tree[tree.scope] = tree.tree_id
        for leaf in tree.iter_leaves():
            dst.placement.add(leaf.payload, tree.tree_id, leaf.node_id)
        for leaf in list(tree.iter_leaves()):
            if not self._wanted(tree.scope, leaf.payload):
                dst._remove_leaf(leaf.payload, tree.tree_id, leaf.node_id)
                continue
            self._sync_leaf(tree, leaf)
        if not tree.pending and not tree.dropped:
            for n in tree.nodes.values():
                dst.node_index.put(n.node_id, tree.tree_id, n.embedding, n.summary)
            dst.root_index.put(tree.tree_id, tree.tree_id, tree.root.embedding, tree.root.summary)
            tree.touched = False
        else:
            for n in tree.nodes.values():
                if not n.dirty:
                    dst.node_index.put(n.node_id, tree.tree_id, n.embedding, n.summary)
            tree.touched = True

    def _sync_leaf(self, tree: MemTree, leaf) -> None:
        anchor = self.dst.payload_anchor(leaf.payload)
        text = self.dst.payload_text(leaf.payload)
        if leaf.interval != anchor:
            tree.move(leaf, anchor)
        if leaf.summary is not None and leaf.level == 0 and tree.family != "session" and leaf.summary != text:
            tree.touch_leaf(leaf)

    def trees(self) -> None:
        dst, src = self.dst, self.src
        for tid in sorted(src.trees):
            tree = src.trees[tid]
            if tree.family == "session" and tree.scope.key in self.shared_sessions \
                    and dst.tree_for(tree.scope) is not None:
                continue
            scope = self._target_scope(tree)
            if scope is None:
                continue
            mine = dst.tree_for(scope)
            if mine is None:
                clone, _ = tree.clone(dst.ids.next("T"), dst.ids.factory("N"), self.payload, scope)
                self._adopt(clone)
                self.report.trees_copied += 1
                continue
            self.report.trees_merged += 1
            incoming = [self.payload(l.payload) for l in tree.iter_leaves()]
            if tree.leaf_count > mine.leaf_count:
                # the incoming tree is larger: keep its shape and feed ours into it
                clone, _ = tree.clone(mine.tree_id, dst.ids.factory("N"), self.payload, scope)
                ours = [l.payload for l in mine.iter_leaves()]
                have = set(incoming)
                old_nodes = list(mine.nodes)
                for leaf in list(mine.iter_leaves()):
                    dst.placement.remove(leaf.payload, mine.tree_id, leaf.node_id)
                del dst.trees[mine.tree_id]
                for nid in old_nodes:
                    dst.node_index.delete(nid)
                for nid in mine.dropped:
                    dst.node_index.delete(nid)
                self._adopt(clone)
                for p in ours:
                    if p not in have and self._wanted(scope, p):
                        dst.insert(_record(scope, p, dst.payload_anchor(p)))
                        self.report.leaves_inserted += 1
                clone.touched = True
                continue
            for p in incoming:
                if dst.placement.leaf_in(p, mine.tree_id) is None and self._wanted(scope, p):
                    dst.insert(_record(scope, p, dst.payload_anchor(p)))
                    self.report.leaves_inserted += 1

    def changed(self) -> None:
        for old, new in self.changed_facts:
            self.dst.replace_fact(old, new)
            if new.text != old.text:
                self.dst.ensure_fact_vector(new, self.be)

    def entity_gaps(self) -> None:
        """Facts whose entity set grew need leaves in the new entity trees."""
        dst = self.dst
        for _, new in self.changed_facts:
            for e in sorted(new.entities):
                dst.insert(_record(ScopeId("entity", e), PayloadRef("fact", new.fact_id), new.anchor))

    def registry(self) -> None:
        dst, src = self.dst, self.src
        for sid, art in src.registry.items():
            facts = {self.fact_map[f] for f in art.fact_ids if f in self.fact_map}
            cells = {self.cell_map[c] for c in art.cell_ids if c in self.cell_map}
            if sid in dst.registry:
                mine = dst.registry.lookup(sid)
                facts |= mine.fact_ids
                cells |= mine.cell_ids
            dst.register(sid, sorted(facts), sorted(cells))


def _record(scope: ScopeId, payload: PayloadRef, anchor):
    from .substrate import RoutedRecord
    return RoutedRecord(scope, payload, anchor)


def merge(state_a, state_b, backends) -> tuple[object, MergeReport]:
    """Merge ``state_b`` into a copy of ``state_a``; neither input is modified.

    Facts reconcile by canonical key; trees match by scope (scene trees by
    centroid similarity). Unmatched trees are copied with their summaries and
    embeddings; matched trees absorb the smaller side's leaves and only the
    resulting dirty paths are refreshed.
    """
    _require_flushed(state_a, "first store")
    _require_flushed(state_b, "second store")
    t0 = time.perf_counter()
    before = backends.ledger.snapshot()
    report = MergeReport()
    dst = copy.deepcopy(state_a)
    m = _Merger(dst, state_b, backends, report)
    m.sessions()
    m.facts()
    m.changed()
    m.scenes()
    m.trees()
    m.entity_gaps()
    stats = dst.flush(backends)
    m.registry()
    report.flush = stats.to_json()
    report.port_calls = _calls(before, backends)
    report.wall_seconds = time.perf_counter() - t0
    return dst, report


# ---------------------------------------------------------------------------
# rematerialize
# ---------------------------------------------------------------------------

SUPPORTED_MIGRATIONS = ("tree.k_session", "tree.k_entity", "tree.k_scene", "embedder", "summarizer",
                        "retrieval.*", "concurrency", "flush_parallelism", "retries", "chunk_error_policy")


@dataclass
class RematerializeReport:
    rebuilt_trees: list[str] = field(default_factory=list)
    reembedded: bool = False
    resummarized: bool = False
    port_calls: dict[str, int] = field(default_factory=dict)
    flush: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def rematerialize(store, config: MemForestConfig, backends, embedder_changed: bool = False,
                  summarizer_changed: bool = False) -> RematerializeReport:
    """Regenerate derived artifacts from facts, cells and scope assignments only.

    A new branching factor rebuilds tree shapes (leaves keep their ids and
    summaries); a new embedder re-embeds every node and fact; a new
    summarizer re-summarizes every node. The extractor is never called.
    """
    unsupported = []
    if config.chunk_size != store.config.chunk_size:
        unsupported.append("chunk_size")
    if config.theta_scene != store.config.theta_scene:
        unsupported.append("theta_scene")
    if unsupported:
        raise UnsupportedMigration(f"cannot rematerialize a change of {', '.join(unsupported)}; "
                                   f"supported: {', '.join(SUPPORTED_MIGRATIONS)}")
    before = backends.ledger.snapshot()
    report = RematerializeReport()
    old_k = store.config.tree
    store.config = config
    for tid in sorted(store.trees):
        tree = store.trees[tid]
        k = config.tree.k_for(tree.family)
        if k != old_k.k_for(tree.family):
            _rebuild(store, tree, k)
            report.rebuilt_trees.append(tid)
    if summarizer_changed:
        for tree in store.trees.values():
            for n in tree.nodes.values():
                if n.level > 0 or tree.family == "session":
                    n.dirty = True
                    tree.pending[n.node_id] = n
            tree.touched = True
        report.resummarized = True
    if embedder_changed:
        store.fact_index = type(store.fact_index)("facts")
        store.node_index = type(store.node_index)("nodes")
        store.root_index = type(store.root_index)("roots")
        for fid in sorted(store.facts):
            fact = store.facts[fid]
            store.fact_index.put(fid, fid, backends.embed(fact.text), fact.text)
        _recompute_scene_centroids(store)
        _reembed_clean(store, backends)
        report.reembedded = True
    stats = store.flush(backends)
    report.flush = stats.to_json()
    report.port_calls = _calls(before, backends)
    return report


def _recompute_scene_centroids(store) -> None:
    for c in store.scenes.clusters.values():
        for fid in list(c.members):
            if fid in store.fact_index:
                c.members[fid] = store.fact_index.vector(fid).copy()
        c.recompute()


def _reembed_clean(store, backends) -> None:
    """Fresh embeddings for every clean node, bottom-up; single-child nodes copy their child."""
    for tid in sorted(store.trees):
        tree = store.trees[tid]
        for n in sorted(tree.nodes.values(), key=lambda x: (x.level, x.node_id)):
            if n.dirty:
                continue
            if n.level > 0 and len(n.children) == 1:
                n.embedding = n.children[0].embedding.copy()
            else:
                n.embedding = backends.embed(n.summary)
            store.node_index.put(n.node_id, tid, n.embedding, n.summary)
        tree.touched = True


def _rebuild(store, tree: MemTree, k: int) -> None:
    """Re-shape a tree under a new branching factor; leaves (and their summaries) survive."""
    leaves = list(tree.iter_leaves())
    for n in list(tree.nodes.values()):
        if n.level > 0:
            tree.nodes.pop(n.node_id)
            tree.pending.pop(n.node_id, None)
            tree.dropped.add(n.node_id)
            n.children = []
    for leaf in leaves:
        leaf.parent = None
    tree.k = k
    tree.repack(leaves)
