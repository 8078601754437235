"""Scope routing: session cells, entity labels and greedy online scene clusters.

Routing never calls the extractor or summarizer; the only port it uses is
the embedder, once per fact, to place the fact in a scene cluster.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .substrate import CanonicalFact, DialogueCell, PayloadRef, RoutedRecord, ScopeId

logger = logging.getLogger(__name__)


def mean_direction(vectors) -> np.ndarray:
    m = np.mean(np.asarray(vectors, dtype=np.float64), axis=0)
    n = float(np.linalg.norm(m))
    if n == 0.0:
        # antipodal members cancel out; fall back to the first member's direction
        return np.asarray(vectors[0], dtype=np.float64).copy()
    return m / n


@dataclass
class SceneCluster:
    cluster_id: str
    centroid: np.ndarray
    members: dict[str, np.ndarray] = field(default_factory=dict)  # fact id -> unit vector
    topics: Counter = field(default_factory=Counter)

    @property
    def label(self) -> str:
        if not self.topics:
            return "general"
        return min(self.topics.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    def recompute(self) -> None:
        ids = sorted(self.members)
        self.centroid = mean_direction([self.members[i] for i in ids])

    def to_json(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "centroid": [float(x) for x in self.centroid],
            "members": sorted(self.members),
            "topics": dict(sorted(self.topics.items())),
            "label": self.label,
        }


class SceneState:
    """Ordered scene clusters plus the sticky fact -> cluster assignment."""

    def __init__(self, theta: float = 0.60):
        self.theta = theta
        self.clusters: dict[str, SceneCluster] = {}  # creation order
        self.fact_scene: dict[str, str] = {}
        self.pending: set[str] = set()  # facts whose scene assignment awaits an embedding

    def __len__(self) -> int:
        return len(self.clusters)

    def best(self, vec: np.ndarray) -> tuple[str | None, float]:
        best_id, best_sim = None, -np.inf
        for cid, c in self.clusters.items():
            sim = float(np.dot(c.centroid, vec))
            if sim > best_sim or (sim == best_sim and best_id is not None and cid < best_id):
                best_id, best_sim = cid, sim
        return best_id, best_sim

    def assign(self, fact: CanonicalFact, vec: np.ndarray, new_id) -> str:
        """Join the closest cluster at or above theta, else seed a new one. Sticky per fact."""
        if fact.fact_id in self.fact_scene:
            return self.fact_scene[fact.fact_id]
        cid, sim = self.best(vec)
        if cid is None or sim < self.theta:
            cid = new_id()
            self.clusters[cid] = SceneCluster(cid, np.asarray(vec, dtype=np.float64).copy())
        c = self.clusters[cid]
        c.members[fact.fact_id] = np.asarray(vec, dtype=np.float64).copy()
        c.topics.update(fact.topics)
        c.recompute()
        self.fact_scene[fact.fact_id] = cid
        self.pending.discard(fact.fact_id)
        return cid

    def update_member(self, fact: CanonicalFact, old: CanonicalFact | None, vec: np.ndarray | None) -> None:
        cid = self.fact_scene.get(fact.fact_id)
        if cid is None:
            return
        c = self.clusters[cid]
        if old is not None:
            c.topics.subtract(old.topics)
        c.topics.update(fact.topics)
        c.topics = +c.topics
        if vec is not None:
            c.members[fact.fact_id] = np.asarray(vec, dtype=np.float64).copy()
        c.recompute()

    def remove(self, fact: CanonicalFact) -> str | None:
        """Drop a fact; returns the cluster id if the cluster became empty (and was removed)."""
        self.pending.discard(fact.fact_id)
        cid = self.fact_scene.pop(fact.fact_id, None)
        if cid is None:
            return None
        c = self.clusters[cid]
        c.members.pop(fact.fact_id, None)
        c.topics.subtract(fact.topics)
        c.topics = +c.topics
        if not c.members:
            del self.clusters[cid]
            return cid
        c.recompute()
        return None

    def check(self, tol: float = 1e-9) -> list[str]:
        errs = []
        for cid, c in self.clusters.items():
            if not c.members:
                errs.append(f"scene {cid} has no members")
                continue
            want = mean_direction([c.members[i] for i in sorted(c.members)])
            if float(np.max(np.abs(want - c.centroid))) > tol:
                errs.append(f"scene {cid} centroid drifted from the member mean")
            for fid in c.members:
                if self.fact_scene.get(fid) != cid:
                    errs.append(f"scene {cid} member {fid} not mapped back")
        return errs


def assign_scene(fact: CanonicalFact, state: SceneState, vec: np.ndarray, new_id) -> tuple[str, SceneState]:
    return state.assign(fact, vec, new_id), state


def entity_records(fact: CanonicalFact) -> list[RoutedRecord]:
    ref = PayloadRef("fact", fact.fact_id)
    return [RoutedRecord(ScopeId("entity", e), ref, fact.anchor) for e in sorted(fact.entities)]


def session_records(cells: list[DialogueCell]) -> list[RoutedRecord]:
    return [RoutedRecord(ScopeId("session", c.session_id), PayloadRef("cell", c.cell_id), c.anchor)
            for c in cells]


def route(fact: CanonicalFact, session_cells: list[DialogueCell], state: SceneState, backends,
          new_cluster_id, vec: np.ndarray | None = None) -> list[RoutedRecord]:
    """Records for one fact: its session's cells, one per entity label, exactly one scene.

    If the embedder fails the scene record is deferred and the fact is left in
    ``state.pending`` for a later retry.
    """
    out = session_records(session_cells) + entity_records(fact)
    cid = state.fact_scene.get(fact.fact_id)
    if cid is None:
        if vec is None:
            try:
                vec = backends.embed(fact.text)
            except Exception as exc:
                logger.warning("scene assignment for %s deferred: %s", fact.fact_id, exc)
                state.pending.add(fact.fact_id)
                return out
        cid = state.assign(fact, vec, new_cluster_id)
    out.append(RoutedRecord(ScopeId("scene", cid), PayloadRef("fact", fact.fact_id), fact.anchor))
    return out


def route_session(store, facts: list[CanonicalFact], cells: list[DialogueCell], backends) -> list[RoutedRecord]:
    """Route a session's touched facts; cells go to the session tree once, and only if a fact exists.

    Fact vectors are computed here (one embedder call per new or re-worded
    fact) and shared between the FactIndex and scene assignment.
    """
    if not facts:
        return []
    out = session_records(cells)
    for fact in sorted(facts, key=lambda f: f.fact_id):
        vec = store.ensure_fact_vector(fact, backends)
        recs = route(fact, [], store.scenes, backends, lambda: store.ids.next("S"), vec=vec) if vec is not None \
            else route(fact, [], store.scenes, _NoEmbed(), None)
        out.extend(recs)
    return out


class _NoEmbed:
    """Stands in for the embedder after it already failed for this fact."""

    def embed(self, text):
        raise RuntimeError("fact embedding unavailable")
