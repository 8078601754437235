"""Query path: forest recall, per-tree browse, and evidence assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .backends import ChildView, RootView
from .config import ConfigError, RetrievalConfig
from .memtree import MemTree, TreeNode
from .substrate import PayloadRef

logger = logging.getLogger(__name__)

MODES = ("flat", "root-only", "emb", "emb+planner", "llm", "llm+planner")


class NotFlushed(RuntimeError):
    pass


@dataclass(frozen=True)
class RecallCandidate:
    tree_id: str
    root_score: float
    fact_score: float | None
    score: float
    provenance: str  # root | fact | both

    def to_json(self) -> dict:
        return {"tree_id": self.tree_id, "root_score": self.root_score, "fact_score": self.fact_score,
                "score": self.score, "provenance": self.provenance}


@dataclass
class BrowseTrace:
    tree_id: str
    mode: str
    subquery: str | None = None
    visited: list[str] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    leaves: list[tuple[str, float]] = field(default_factory=list)  # (node id, score vs query)
    fallback: str | None = None

    def to_json(self) -> dict:
        return {"tree_id": self.tree_id, "mode": self.mode, "subquery": self.subquery,
                "visited": self.visited, "steps": self.steps,
                "leaves": [[n, s] for n, s in self.leaves], "fallback": self.fallback}


@dataclass(frozen=True)
class Evidence:
    payload: PayloadRef
    text: str
    anchor: object
    source_refs: tuple
    score: float
    tree_id: str | None = None

    def to_json(self) -> dict:
        return {
            "payload": str(self.payload),
            "text": self.text,
            "anchor": self.anchor.to_json() if self.anchor is not None else None,
            "source_refs": [list(r) for r in self.source_refs],
            "score": self.score,
            "tree_id": self.tree_id,
        }


@dataclass
class AnswerContext:
    query: str
    mode: str
    candidates: list[RecallCandidate] = field(default_factory=list)
    traces: list[BrowseTrace] = field(default_factory=list)
    evidence: list[Evidence] = field(default_factory=list)
    subqueries: dict[str, str] = field(default_factory=dict)
    planner_failed: bool = False

    @property
    def chars(self) -> int:
        return sum(len(e.text) for e in self.evidence)

    def texts(self) -> list[str]:
        return [e.text for e in self.evidence]

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "mode": self.mode,
            "candidates": [c.to_json() for c in self.candidates],
            "subqueries": self.subqueries,
            "planner_failed": self.planner_failed,
            "traces": [t.to_json() for t in self.traces],
            "evidence": [e.to_json() for e in self.evidence],
            "evidence_chars": self.chars,
        }


def combine(root: float, fact: float | None, combiner: str = "max", alpha: float = 0.5) -> float:
    if combiner == "max":
        return root if fact is None else max(root, fact)
    f = 0.0 if fact is None else fact
    if combiner == "mean":
        return (root + f) / 2.0
    if combiner == "weighted":
        return alpha * root + (1.0 - alpha) * f
    raise ConfigError(f"unknown combiner {combiner!r}")


def forest_recall(query_vec, store, k_root: int = 10, k_fact: int = 20, k_trees: int = 5,
                  combiner: str = "max", alpha: float = 0.5) -> list[RecallCandidate]:
    """Candidate trees from root-summary hits united with trees of the best-matching facts."""
    if not store.trees or len(store.root_index) == 0:
        return []
    root_hits = dict(store.root_index.search(query_vec, k_root))
    fact_best: dict[str, float] = {}
    if len(store.fact_index):
        for fid, s in store.fact_index.search(query_vec, k_fact):
            for tid in store.placement.trees_of(PayloadRef("fact", fid)):
                if s > fact_best.get(tid, -np.inf):
                    fact_best[tid] = s
    out = []
    for tid in set(root_hits) | set(fact_best):
        if tid not in store.root_index:
            continue
        rs = root_hits.get(tid)
        if rs is None:
            rs = store.root_index.score(tid, query_vec)
        fs = fact_best.get(tid)
        prov = "both" if tid in root_hits and fs is not None else ("root" if tid in root_hits else "fact")
        out.append(RecallCandidate(tid, float(rs), fs, combine(rs, fs, combiner, alpha), prov))
    out.sort(key=lambda c: (-c.score, c.tree_id))
    return out[:k_trees]


def _cos(node: TreeNode, q) -> float:
    return float(np.dot(node.embedding, q))


def _rank_leaves(leaves: list[TreeNode], q, budget: int) -> list[tuple[str, float]]:
    uniq = {n.node_id: n for n in leaves}
    scored = sorted(((-_cos(n, q), n.node_id) for n in uniq.values()))
    return [(nid, -s) for s, nid in scored[:budget]]


def _require_clean(tree: MemTree) -> None:
    if tree.pending:
        raise NotFlushed(f"tree {tree.tree_id} has {len(tree.pending)} dirty nodes; flush first")


def browse_embedding(tree: MemTree, query_vec, beam_width: int = 2, leaf_budget: int = 10,
                     _trace: BrowseTrace | None = None, _start: list[TreeNode] | None = None) -> BrowseTrace:
    """Beam descent on child-summary cosine.

    Every frontier node branches into its ``beam_width`` best internal
    children; leaf children met on the way are all kept and ranked at the end.
    """
    _require_clean(tree)
    trace = _trace or BrowseTrace(tree.tree_id, "emb")
    if tree.root is None:
        return trace
    frontier = _start or [tree.root]
    leaves: list[TreeNode] = [n for n in frontier if n.level == 0]
    frontier = [n for n in frontier if n.level > 0]
    for n in frontier:
        trace.visited.append(n.node_id)
    while frontier:
        children = [c for n in frontier for c in n.children]
        ranked = sorted(children, key=lambda c: (-_cos(c, query_vec), c.node_id))
        trace.steps.append({"from": [n.node_id for n in frontier],
                            "scores": {c.node_id: round(_cos(c, query_vec), 6) for c in children}})
        leaves.extend(c for c in ranked if c.level == 0)
        nxt = []
        for n in frontier:
            best = sorted((c for c in n.children if c.level > 0), key=lambda c: (-_cos(c, query_vec), c.node_id))
            nxt.extend(best[:beam_width])
        frontier = nxt
        trace.visited.extend(c.node_id for c in frontier)
    trace.visited.extend(n.node_id for n in leaves if n.node_id not in trace.visited)
    trace.leaves = _rank_leaves(leaves, query_vec, leaf_budget)
    return trace


def _views(node: TreeNode) -> list[ChildView]:
    return [ChildView(i, c.summary or "", c.interval, c.level == 0) for i, c in enumerate(node.children)]


def _valid_choice(choice, n_children: int, beam_width: int) -> bool:
    if not isinstance(choice, (list, tuple)) or not choice or len(choice) > beam_width:
        return False
    return all(isinstance(i, int) and not isinstance(i, bool) and 0 <= i < n_children for i in choice)


def browse_llm(tree: MemTree, subquery: str, query_vec, backends, beam_width: int = 2,
               leaf_budget: int = 10, step_budget: int | None = None) -> BrowseTrace:
    """Chooser-steered descent.

    Each chooser call sees one frontier node's ordered children and answers
    with child indices or ``None`` (stop: that branch contributes nothing
    more). Malformed answers fall back to embedding scores for that step; a
    failing chooser port falls back to embedding browse for the whole tree.
    Frontier nodes left when ``step_budget`` runs out finish by embedding.
    """
    _require_clean(tree)
    trace = BrowseTrace(tree.tree_id, "llm", subquery=subquery)
    if tree.root is None:
        return trace
    budget = step_budget if step_budget is not None else 2 * tree.height
    trace.visited.append(tree.root.node_id)
    if tree.root.level == 0:
        trace.leaves = _rank_leaves([tree.root], query_vec, leaf_budget)
        return trace
    frontier = [tree.root]
    leaves: list[TreeNode] = []
    used = 0
    while frontier and used < budget:
        nxt: list[TreeNode] = []
        for pos, node in enumerate(frontier):
            if used >= budget:
                nxt.extend(frontier[pos:])
                break
            used += 1
            try:
                choice = backends.choose(subquery, _views(node), beam_width)
            except Exception as exc:
                logger.warning("chooser failed on %s: %s; using embedding browse", tree.tree_id, exc)
                out = browse_embedding(tree, query_vec, beam_width, leaf_budget)
                out.mode, out.subquery, out.fallback = "llm", subquery, "chooser-error"
                return out
            step = {"node": node.node_id, "choice": choice}
            if choice is None:
                step["stop"] = True
                trace.steps.append(step)
                continue
            if not _valid_choice(choice, len(node.children), beam_width):
                choice = [i for _, i in sorted((-_cos(c, query_vec), i) for i, c in enumerate(node.children))][:beam_width]
                step["fallback"] = "embedding"
                step["used"] = choice
                trace.fallback = trace.fallback or "invalid-choice"
            trace.steps.append(step)
            for i in dict.fromkeys(choice):
                child = node.children[i]
                trace.visited.append(child.node_id)
                (leaves if child.level == 0 else nxt).append(child)
        frontier = nxt
    if frontier:
        trace.fallback = trace.fallback or "step-budget"
        rest = browse_embedding(tree, query_vec, beam_width, leaf_budget,
                                _trace=BrowseTrace(tree.tree_id, "emb"), _start=frontier)
        trace.visited.extend(n for n in rest.visited if n not in trace.visited)
        leaves.extend(tree.nodes[nid] for nid, _ in rest.leaves)
    trace.leaves = _rank_leaves(leaves, query_vec, leaf_budget)
    return trace


def plan_subqueries(query: str, recalled: list[RootView], backends) -> tuple[dict[str, str], bool]:
    """One planner call for all recalled roots; returns (tree_id -> subquery, failed flag)."""
    if not recalled:
        return {}, False
    if backends.planner is None:
        return {r.tree_id: query for r in recalled}, False
    try:
        plan = backends.plan(query, recalled)
    except Exception as exc:
        logger.warning("planner failed: %s", exc)
        return {r.tree_id: query for r in recalled}, True
    out = {}
    for r in recalled:
        sub = plan.get(r.tree_id) if isinstance(plan, dict) else None
        out[r.tree_id] = sub if isinstance(sub, str) and sub.strip() else query
    return out, False


def _evidence(store, payload: PayloadRef, score: float, tree_id: str | None) -> Evidence:
    if payload.kind == "fact":
        f = store.facts[payload.id]
        refs = tuple(sorted(f.source_refs))
        return Evidence(payload, f.text, f.anchor, refs, score, tree_id)
    c = store.cells[payload.id]
    return Evidence(payload, c.text, c.anchor, ((c.session_id, c.first_turn, c.last_turn),), score, tree_id)


def retrieve(query: str, store, backends, mode: str = "llm+planner",
             config: RetrievalConfig | None = None) -> AnswerContext:
    cfg = config or store.config.retrieval
    if mode not in MODES:
        raise ConfigError(f"unknown retrieval mode {mode!r}; choose from {', '.join(MODES)}")
    ctx = AnswerContext(query, mode)
    if not store.facts and not store.trees:
        return ctx
    dirty = store.dirty_trees()
    if dirty:
        raise NotFlushed(f"{len(dirty)} trees have pending refresh work; flush first")
    q = backends.embed(query)

    if mode == "flat":
        if len(store.fact_index):
            hits = store.fact_index.search(q, cfg.final_top_k)
            ctx.evidence = [_evidence(store, PayloadRef("fact", fid), s, None) for fid, s in hits]
        return ctx

    ctx.candidates = forest_recall(q, store, cfg.k_root, cfg.k_fact, cfg.k_trees, cfg.combiner, cfg.alpha)
    if mode == "root-only":
        for c in ctx.candidates[:cfg.final_top_k]:
            t = store.trees[c.tree_id]
            ctx.evidence.append(Evidence(PayloadRef("root", c.tree_id), t.root.summary, t.root.interval,
                                         (), c.score, c.tree_id))
        return ctx

    trees = [store.trees[c.tree_id] for c in ctx.candidates]
    if mode.endswith("+planner"):
        views = [RootView(t.tree_id, str(t.scope), store.tree_topic(t), t.root.summary or "") for t in trees]
        ctx.subqueries, ctx.planner_failed = plan_subqueries(query, views, backends)
    else:
        ctx.subqueries = {t.tree_id: query for t in trees}

    for t in trees:
        sub = ctx.subqueries[t.tree_id]
        if mode.startswith("emb"):
            sv = q if sub == query else backends.embed(sub)
            trace = browse_embedding(t, sv, cfg.beam_width, cfg.leaf_budget)
            trace.subquery = sub
        else:
            trace = browse_llm(t, sub, q, backends, cfg.beam_width, cfg.leaf_budget, cfg.step_budget)
        ctx.traces.append(trace)

    pooled: dict[PayloadRef, tuple[float, str, str]] = {}
    for trace in ctx.traces:
        tree = store.trees[trace.tree_id]
        for nid, _ in trace.leaves:
            leaf = tree.nodes[nid]
            s = _cos(leaf, q)
            key = (-s, trace.tree_id, nid)
            if leaf.payload not in pooled or key < pooled[leaf.payload]:
                pooled[leaf.payload] = key
    ranked = sorted(pooled.items(), key=lambda kv: kv[1])[:cfg.final_top_k]
    ctx.evidence = [_evidence(store, p, -k[0], k[1]) for p, k in ranked]
    return ctx
