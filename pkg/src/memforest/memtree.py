"""Scoped temporal trees with eager structure and lazy, level-parallel refresh.

Leaves sit at level 0 ordered by ``(anchor.start, insertion seq)``; internal
nodes at level >= 1 hold 1..k children. Height is counted in levels, so a
single-leaf tree has height 1 and a tree of N leaves always keeps
``height <= ceil(log_k N) + 1``.

Structural edits are eager: attach, shift-to-sibling or split, merge on
underflow. When a split would push the root past the height bound, the
cheaper of two repairs runs: rebuild the lowest subtree that still has room
for its leaves, or split through and repack only the levels above the
highest level that still fits (reusing every node whose child list
survives). Summaries and
embeddings are lazy: an edit only marks the edited nodes and their
ancestors dirty; :func:`flush` refreshes dirty nodes bottom-up, one level at
a time, with same-level work (across all trees) fanned out to a thread pool.
"""

from __future__ import annotations

import bisect
import logging
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .substrate import PayloadRef, RoutedRecord, ScopeId, TemporalAnchor, anchor_union, coarser

logger = logging.getLogger(__name__)


def ceil_log(k: int, n: int) -> int:
    """Smallest L with k**L >= n (0 for n <= 1)."""
    level, cap = 0, 1
    while cap < n:
        cap *= k
        level += 1
    return level


def height_bound(k: int, n: int) -> int:
    return ceil_log(k, n) + 1 if n >= 1 else 0


class TreeNode:
    __slots__ = ("node_id", "level", "parent", "children", "payload", "seq", "interval",
                 "summary", "embedding", "dirty", "lo", "hi")

    def __init__(self, node_id: str, level: int):
        self.node_id = node_id
        self.level = level
        self.parent: TreeNode | None = None
        self.children: list[TreeNode] = []
        self.payload: PayloadRef | None = None
        self.seq = 0
        self.interval: TemporalAnchor | None = None
        self.summary: str | None = None
        self.embedding: np.ndarray | None = None
        self.dirty = False
        self.lo: tuple[int, int] | None = None
        self.hi: tuple[int, int] | None = None

    @property
    def is_leaf(self) -> bool:
        return self.level == 0

    def key(self) -> tuple[int, int]:
        return (self.interval.start, self.seq)

    def ancestors(self) -> Iterator[TreeNode]:
        n = self.parent
        while n is not None:
            yield n
            n = n.parent

    def __repr__(self):
        what = self.payload if self.is_leaf else f"{len(self.children)} children"
        return f"TreeNode({self.node_id}, L{self.level}, {what}, dirty={self.dirty})"


class MemTree:
    def __init__(self, tree_id: str, scope: ScopeId, k: int, new_node_id: Callable[[], str]):
        if k < 2:
            raise ValueError("branching factor must be >= 2")
        self.tree_id = tree_id
        self.scope = scope
        self.k = k
        self.root: TreeNode | None = None
        self.leaf_count = 0
        self.nodes: dict[str, TreeNode] = {}
        self.pending: dict[str, TreeNode] = {}
        self.dropped: set[str] = set()
        self.touched = False
        self.repacks = 0
        self._seq = 0
        self._new_id = new_node_id

    # -- basic views -------------------------------------------------------

    @property
    def family(self) -> str:
        return self.scope.family

    @property
    def height(self) -> int:
        return 0 if self.root is None else self.root.level + 1

    def __len__(self) -> int:
        return self.leaf_count

    def iter_leaves(self) -> Iterator[TreeNode]:
        if self.root is None:
            return
        stack = [self.root]
        while stack:
            n = stack.pop()
            if n.level == 0:
                yield n
            else:
                stack.extend(reversed(n.children))

    def iter_nodes(self) -> Iterator[TreeNode]:
        for nid in sorted(self.nodes):
            yield self.nodes[nid]

    def leaf_for(self, payload: PayloadRef) -> TreeNode | None:
        for leaf in self.iter_leaves():
            if leaf.payload == payload:
                return leaf
        return None

    # -- bookkeeping helpers ----------------------------------------------

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _new_internal(self, level: int) -> TreeNode:
        n = TreeNode(self._new_id(), level)
        self.nodes[n.node_id] = n
        return n

    @staticmethod
    def _touch(n: TreeNode, touched: dict) -> None:
        if n not in touched:
            touched[n] = tuple(c.node_id for c in n.children)

    def _refresh_struct(self, n: TreeNode) -> None:
        if n.level == 0:
            n.lo = n.hi = (n.interval.start, n.seq)
            return
        ch = n.children
        first = ch[0].interval
        start, end, prec = first.start, first.end, first.precision  # children are ordered by start
        for c in ch[1:]:
            iv = c.interval
            if iv.end > end:
                end = iv.end
            if iv.precision != prec:
                prec = coarser(prec, iv.precision)
        cur = n.interval
        if cur is None or cur.start != start or cur.end != end or cur.precision != prec:
            n.interval = TemporalAnchor(start, end, prec)
        n.lo = ch[0].lo
        n.hi = ch[-1].hi

    def _fix_up(self, nodes: Iterable[TreeNode]) -> None:
        todo: dict[TreeNode, None] = {}
        for n in nodes:
            while n is not None and n not in todo:
                todo[n] = None
                n = n.parent
        for n in sorted(todo, key=lambda x: x.level):
            if n.node_id in self.nodes and (n.level == 0 or n.children):
                self._refresh_struct(n)

    def _mark(self, n: TreeNode) -> set[str]:
        newly = set()
        while n is not None and not n.dirty:
            n.dirty = True
            self.pending[n.node_id] = n
            newly.add(n.node_id)
            n = n.parent
        return newly

    def mark_dirty_ancestors(self, leaf: TreeNode) -> set[str]:
        """Mark ``leaf`` and every ancestor dirty; returns only the newly marked ids.

        Dirty flags are upward closed, so the walk stops at the first node that
        is already dirty and repeated marks coalesce.
        """
        if leaf.node_id not in self.nodes:
            raise KeyError(f"{leaf.node_id} is not in tree {self.tree_id}")
        return self._mark(leaf)

    def _commit(self, touched: dict, new_nodes: list[TreeNode]) -> None:
        changed = [n for n, before in touched.items()
                   if n.node_id in self.nodes and tuple(c.node_id for c in n.children) != before]
        changed.extend(n for n in new_nodes if n.node_id in self.nodes)
        self._fix_up(changed)
        for n in changed:
            self._mark(n)
        self.touched = True

    # -- insert ------------------------------------------------------------

    def insert(self, payload: PayloadRef, anchor: TemporalAnchor, seq: int | None = None) -> TreeNode:
        leaf = TreeNode(self._new_id(), 0)
        leaf.payload = payload
        leaf.interval = anchor
        if seq is None:
            leaf.seq = self._next_seq()
        else:
            leaf.seq = seq
            self._seq = max(self._seq, seq)
        self.nodes[leaf.node_id] = leaf
        self.leaf_count += 1
        self._attach(leaf)
        self._enforce_height()
        return leaf

    def _child_index_for(self, node: TreeNode, key) -> int:
        his = [c.hi for c in node.children]
        i = bisect.bisect_left(his, key)
        return min(i, len(his) - 1)

    def _is_rightmost(self, n: TreeNode) -> bool:
        while n.parent is not None:
            if n.parent.children[-1] is not n:
                return False
            n = n.parent
        return True

    def _attach(self, leaf: TreeNode) -> None:
        leaf.parent = None
        leaf.dirty = False
        leaf.lo = leaf.hi = (leaf.interval.start, leaf.seq)
        touched: dict = {}
        new_nodes = [leaf]
        if self.root is None:
            self.root = leaf
            self._commit(touched, new_nodes)
            return
        key = leaf.lo
        if self.root.level == 0:
            old = self.root
            r = self._new_internal(1)
            r.children = [old, leaf] if old.lo < key else [leaf, old]
            old.parent = leaf.parent = r
            self.root = r
            new_nodes.append(r)
            self._commit(touched, new_nodes)
            return
        node = self.root
        while node.level > 1:
            node = node.children[self._child_index_for(node, key)]
        pos = bisect.bisect_left([c.lo for c in node.children], key)
        self._touch(node, touched)
        node.children.insert(pos, leaf)
        leaf.parent = node
        self._resolve_overflow(node, pos, touched, new_nodes)
        self._commit(touched, new_nodes)

    def _resolve_overflow(self, node: TreeNode, pos: int, touched: dict, new_nodes: list) -> None:
        k = self.k
        while len(node.children) > k:
            parent = node.parent
            if parent is not None:
                idx = parent.children.index(node)
                options = []
                if idx + 1 < len(parent.children) and len(parent.children[idx + 1].children) < k:
                    options.append((len(parent.children[idx + 1].children), 0, parent.children[idx + 1]))
                if idx > 0 and len(parent.children[idx - 1].children) < k:
                    options.append((len(parent.children[idx - 1].children), 1, parent.children[idx - 1]))
                if options:
                    _, side, sib = min(options, key=lambda o: (o[0], o[1]))
                    self._touch(sib, touched)
                    if side == 0:
                        moved = node.children.pop()
                        sib.children.insert(0, moved)
                    else:
                        moved = node.children.pop(0)
                        sib.children.append(moved)
                    moved.parent = sib
                    self._fix_up([node, sib])
                    return
            if not self._split_fits(node):
                # either rebuild the lowest subtree with room, or split through the root and
                # let _enforce_height repack the upper levels; take whichever touches less
                goat, leaves = self._scapegoat(node)
                if leaves // max(self.k - 1, 1) <= self._upper_repack_size():
                    self._rebuild_subtree(goat, touched, new_nodes)
                    return
            appended = pos == len(node.children) - 1 and self._is_rightmost(node)
            cut = k if appended else (k + 2) // 2
            right = self._new_internal(node.level)
            right.children = node.children[cut:]
            node.children = node.children[:cut]
            for c in right.children:
                c.parent = right
            new_nodes.append(right)
            self._fix_up([node, right])
            if parent is None:
                r = self._new_internal(node.level + 1)
                r.children = [node, right]
                node.parent = right.parent = r
                self.root = r
                new_nodes.append(r)
                return
            self._touch(parent, touched)
            idx = parent.children.index(node)
            parent.children.insert(idx + 1, right)
            right.parent = parent
            node, pos = parent, idx + 1

    def _split_fits(self, node: TreeNode) -> bool:
        """Would splitting ``node`` (and whatever splits follow) keep the height bound?"""
        k = self.k
        n = node
        while n.parent is not None:
            p = n.parent
            if len(p.children) < k:
                return True
            gp = p.parent
            if gp is not None:
                i = gp.children.index(p)
                if (i > 0 and len(gp.children[i - 1].children) < k) or \
                        (i + 1 < len(gp.children) and len(gp.children[i + 1].children) < k):
                    return True
            n = p
        return n.level + 1 <= ceil_log(k, self.leaf_count)

    @staticmethod
    def _count_leaves(n: TreeNode) -> int:
        total, stack = 0, [n]
        while stack:
            x = stack.pop()
            if x.level == 1:
                total += len(x.children)
            elif x.level == 0:
                total += 1
            else:
                stack.extend(x.children)
        return total

    def _scapegoat(self, node: TreeNode) -> tuple[TreeNode, int]:
        """Lowest ancestor (or ``node``) with room for its leaves at its own level, and its leaf count."""
        a, count, came_from = node, self._count_leaves(node), None
        while True:
            if came_from is not None:
                count += sum(self._count_leaves(c) for c in a.children if c is not came_from)
            if count <= self.k ** a.level or a.parent is None:
                return a, count
            came_from, a = a, a.parent

    def _upper_repack_size(self) -> int:
        """Nodes above the highest level that would still fit after one more root split."""
        top = ceil_log(self.k, self.leaf_count)
        row, size = [self.root], 0
        while row[0].level > 0:
            if row[0].level < top and len(row) + 1 <= self.k ** (top - row[0].level):
                break
            size += len(row)
            row = [c for n in row for c in n.children]
        return size + len(row) // self.k

    def _rebuild_subtree(self, top: TreeNode, touched: dict, new_nodes: list) -> None:
        """Spread the leaves under ``top`` evenly over fresh nodes; ``top`` keeps its id and level."""
        leaves: list[TreeNode] = []
        stack = [top]
        while stack:
            x = stack.pop()
            if x.level == 0:
                leaves.append(x)
                continue
            if x is not top:
                self.nodes.pop(x.node_id, None)
                self.pending.pop(x.node_id, None)
                self.dropped.add(x.node_id)
            stack.extend(reversed(x.children))
        k = self.k

        def fan(level: int, c: int) -> int:
            # about c ** (1 / level) children, enough that each fits, never more than k
            low = -(-c // k ** (level - 1))
            return max(low, min(k, c, max(1, round(c ** (1.0 / level)))))

        def build(node: TreeNode, items: list[TreeNode]) -> None:
            m = fan(node.level, len(items))
            q, r = divmod(len(items), m)
            kids, at = [], 0
            for i in range(m):
                part = items[at:at + q + (i < r)]
                at += len(part)
                if node.level == 1:
                    child = part[0]
                else:
                    child = self._new_internal(node.level - 1)
                    new_nodes.append(child)
                    build(child, part)
                child.parent = node
                kids.append(child)
            node.children = kids

        self._touch(top, touched)
        build(top, leaves)
        self.repacks += 1

    # -- remove ------------------------------------------------------------

    def remove(self, leaf: TreeNode, keep_node: bool = False) -> None:
        """Detach ``leaf``; prune emptied ancestors, merge underfull siblings, collapse the root."""
        if leaf.level != 0 or self.nodes.get(leaf.node_id) is not leaf:
            raise KeyError(f"{leaf.node_id} is not a leaf of tree {self.tree_id}")
        touched: dict = {}
        removed: list[TreeNode] = []
        self.pending.pop(leaf.node_id, None)
        if not keep_node:
            removed.append(leaf)
        parent = leaf.parent
        leaf.parent = None
        self.leaf_count -= 1
        if parent is None:
            self.root = None
        else:
            self._touch(parent, touched)
            parent.children.remove(leaf)
            cur = parent
            while cur is not None and not cur.children:
                up = cur.parent
                removed.append(cur)
                if up is None:
                    self.root = None
                    cur = None
                    break
                self._touch(up, touched)
                up.children.remove(cur)
                cur = up
            n = cur
            while n is not None and n.parent is not None:
                p = n.parent
                idx = p.children.index(n)
                for j in (idx - 1, idx + 1):
                    if 0 <= j < len(p.children) and len(p.children[j].children) + len(n.children) <= self.k:
                        # the node on the edited path absorbs its sibling, so nothing
                        # off that path changes
                        sib = p.children[j]
                        self._touch(n, touched)
                        self._touch(p, touched)
                        for c in sib.children:
                            c.parent = n
                        n.children = sib.children + n.children if j < idx else n.children + sib.children
                        sib.children = []
                        p.children.remove(sib)
                        removed.append(sib)
                        self._fix_up([n])
                        break
                n = p
            while self.root is not None and self.root.level > 0 and len(self.root.children) == 1:
                old = self.root
                self.root = old.children[0]
                self.root.parent = None
                old.children = []
                removed.append(old)
        for r in removed:
            if r is leaf and keep_node:
                continue
            self.nodes.pop(r.node_id, None)
            self.pending.pop(r.node_id, None)
            self.dropped.add(r.node_id)
            r.parent = None
        self._commit(touched, [])
        self._enforce_height()

    def move(self, leaf: TreeNode, anchor: TemporalAnchor) -> None:
        """Give a leaf a new anchor, re-positioning it if its start moved. Keeps the node id."""
        if leaf.interval.start == anchor.start:
            leaf.interval = anchor
            self._fix_up([leaf])
            leaf.dirty = False
            self.pending.pop(leaf.node_id, None)
            self._mark(leaf)
            self.touched = True
            return
        self.remove(leaf, keep_node=True)
        leaf.interval = anchor
        self.leaf_count += 1
        self._attach(leaf)
        self._enforce_height()

    def touch_leaf(self, leaf: TreeNode) -> None:
        """Payload text changed in place: the leaf and its path need a refresh."""
        if leaf.dirty:
            return
        self._mark(leaf)
        self.touched = True

    # -- balance -------------------------------------------------------------

    def _enforce_height(self) -> None:
        if self.root is None:
            return
        top = ceil_log(self.k, self.leaf_count)
        if self.root.level <= top:
            return
        # keep the highest level whose nodes still fit under a root at ``top``
        # and rebuild only above it; level 0 always fits
        row, above = [self.root], None
        while True:
            lvl = row[0].level
            if lvl < top and len(row) <= self.k ** (top - lvl):
                self.repack(row, above)
                return
            above = row
            row = [c for n in row for c in n.children]

    def repack(self, leaves: list[TreeNode] | None = None, old_upper: list[TreeNode] | None = None) -> None:
        """Rebuild a left-packed tree of minimal height, reusing nodes whose children survive.

        ``leaves`` may also be the ordered nodes of one higher level; those
        subtrees are kept as they are and only the levels above are rebuilt.
        ``old_upper`` is the row just above them, when the caller has it.
        """
        if leaves is None:
            leaves = list(self.iter_leaves())
        base = leaves[0].level if leaves else 0
        if old_upper is None:
            old_internal = [n for n in self.nodes.values() if n.level > base]
        else:
            old_internal = []
            row = old_upper
            while row:
                old_internal.extend(row)
                row = list({id(n.parent): n.parent for n in row if n.parent is not None}.values())
        reused: set[TreeNode] = set()
        new_nodes: list[TreeNode] = []
        level_nodes = leaves
        level = base
        while len(level_nodes) > 1:
            level += 1
            nxt = []
            for i in range(0, len(level_nodes), self.k):
                group = level_nodes[i:i + self.k]
                n = group[0].parent  # still the old parent unless rebuilt at the level below
                if n is None or n in reused or n.level != level or len(n.children) != len(group) \
                        or any(a is not b for a, b in zip(n.children, group)):
                    n = self._new_internal(level)
                    n.children = list(group)
                    new_nodes.append(n)
                else:
                    reused.add(n)
                for c in group:
                    c.parent = n
                nxt.append(n)
            level_nodes = nxt
        self.root = level_nodes[0] if level_nodes else None
        if self.root is not None:
            self.root.parent = None
        for n in old_internal:
            if n not in reused:
                self.nodes.pop(n.node_id, None)
                self.pending.pop(n.node_id, None)
                self.dropped.add(n.node_id)
                n.children = []
                n.parent = None
        self._commit({}, new_nodes)
        self.repacks += 1

    # -- copies and checks -----------------------------------------------------

    def clone(self, tree_id: str, new_node_id: Callable[[], str],
              payload_map: Callable[[PayloadRef], PayloadRef | None] | None = None,
              scope: ScopeId | None = None) -> tuple[MemTree, dict[str, str]]:
        """Copy structure and derived artifacts under fresh ids; returns (tree, old->new ids)."""
        out = MemTree(tree_id, scope or self.scope, self.k, new_node_id)
        out._seq = self._seq
        idmap: dict[str, str] = {}

        def copy(n: TreeNode, parent: TreeNode | None) -> TreeNode:
            c = TreeNode(new_node_id(), n.level)
            idmap[n.node_id] = c.node_id
            c.parent = parent
            c.seq, c.interval, c.summary, c.dirty = n.seq, n.interval, n.summary, n.dirty
            c.lo, c.hi = n.lo, n.hi
            c.embedding = None if n.embedding is None else n.embedding.copy()
            if n.level == 0:
                c.payload = payload_map(n.payload) if payload_map else n.payload
            out.nodes[c.node_id] = c
            if c.dirty:
                out.pending[c.node_id] = c
            c.children = [copy(ch, c) for ch in n.children]
            return c

        if self.root is not None:
            out.root = copy(self.root, None)
        out.leaf_count = self.leaf_count
        return out, idmap

    def check(self) -> list[str]:
        """Full scan of structural invariants; returns human-readable violations."""
        errs: list[str] = []
        tid = self.tree_id
        if self.root is None:
            if self.leaf_count or self.nodes:
                errs.append(f"{tid}: empty root but {self.leaf_count} leaves / {len(self.nodes)} nodes")
            return errs
        if self.root.parent is not None:
            errs.append(f"{tid}: root has a parent")
        seen = 0
        stack = [self.root]
        leaves = []
        while stack:
            n = stack.pop()
            seen += 1
            if self.nodes.get(n.node_id) is not n:
                errs.append(f"{tid}: node {n.node_id} reachable but not registered")
            if n.dirty and n.parent is not None and not n.parent.dirty:
                errs.append(f"{tid}: dirty {n.node_id} under clean parent")
            if n.dirty != (n.node_id in self.pending):
                errs.append(f"{tid}: pending set disagrees with dirty flag on {n.node_id}")
            if not n.dirty and n.summary is None:
                errs.append(f"{tid}: clean node {n.node_id} has no summary")
            if n.level == 0:
                leaves.append(n)
                if n.children:
                    errs.append(f"{tid}: leaf {n.node_id} has children")
                if n.lo != (n.interval.start, n.seq):
                    errs.append(f"{tid}: leaf {n.node_id} key cache stale")
                continue
            if not 1 <= len(n.children) <= self.k:
                errs.append(f"{tid}: node {n.node_id} has {len(n.children)} children (k={self.k})")
                if not n.children:
                    continue
            for c in n.children:
                if c.parent is not n:
                    errs.append(f"{tid}: broken parent pointer {c.node_id} -> {n.node_id}")
                if c.level != n.level - 1:
                    errs.append(f"{tid}: level skew at {n.node_id}")
            for a, b in zip(n.children, n.children[1:]):
                if not a.hi < b.lo:
                    errs.append(f"{tid}: children of {n.node_id} out of order")
            want = anchor_union(c.interval for c in n.children)
            if n.interval != want:
                errs.append(f"{tid}: interval of {n.node_id} is {n.interval}, union is {want}")
            if n.lo != n.children[0].lo or n.hi != n.children[-1].hi:
                errs.append(f"{tid}: key cache stale on {n.node_id}")
            stack.extend(n.children)
        if seen != len(self.nodes):
            errs.append(f"{tid}: {len(self.nodes)} registered nodes but {seen} reachable")
        if len(leaves) != self.leaf_count:
            errs.append(f"{tid}: leaf_count {self.leaf_count} but {len(leaves)} leaves")
        keys = [l.lo for l in self.iter_leaves()]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            errs.append(f"{tid}: leaves not in temporal order")
        if self.height > height_bound(self.k, self.leaf_count):
            errs.append(f"{tid}: height {self.height} exceeds bound {height_bound(self.k, self.leaf_count)} "
                        f"for N={self.leaf_count}, k={self.k}")
        return errs


def insert_leaf(tree: MemTree, record: RoutedRecord, placement=None) -> str:
    if record.scope != tree.scope:
        raise ValueError(f"record scope {record.scope} does not match tree scope {tree.scope}")
    leaf = tree.insert(record.payload, record.anchor)
    if placement is not None:
        placement.add(record.payload, tree.tree_id, leaf.node_id)
    return leaf.node_id


def mark_dirty_ancestors(tree: MemTree, leaf_id: str) -> set[str]:
    return tree.mark_dirty_ancestors(tree.nodes[leaf_id])


# ---------------------------------------------------------------------------
# flush
# ---------------------------------------------------------------------------


@dataclass
class FlushStats:
    structural_inserts: int = 0
    structural_removals: int = 0
    refreshed_by_level: dict[int, int] = field(default_factory=dict)
    calls_by_level: dict[int, int] = field(default_factory=dict)
    summarizer_calls: int = 0
    embedder_calls: int = 0
    depth: int = 0
    trees: list[str] = field(default_factory=list)
    failed_nodes: list[str] = field(default_factory=list)
    summaries: dict[str, str] = field(default_factory=dict, repr=False)
    wall: dict[str, float] = field(default_factory=dict)

    @property
    def refreshed(self) -> int:
        return sum(self.refreshed_by_level.values())

    @property
    def partial(self) -> bool:
        return bool(self.failed_nodes)

    def absorb(self, other: FlushStats) -> FlushStats:
        self.structural_inserts += other.structural_inserts
        self.structural_removals += other.structural_removals
        for src, dst in ((other.refreshed_by_level, self.refreshed_by_level),
                         (other.calls_by_level, self.calls_by_level)):
            for lvl, n in src.items():
                dst[lvl] = dst.get(lvl, 0) + n
        self.summarizer_calls += other.summarizer_calls
        self.embedder_calls += other.embedder_calls
        self.depth = max(self.depth, other.depth)
        self.trees = sorted(set(self.trees) | set(other.trees))
        self.failed_nodes.extend(other.failed_nodes)
        self.summaries.update(other.summaries)
        for phase, secs in other.wall.items():
            self.wall[phase] = self.wall.get(phase, 0.0) + secs
        return self

    def to_json(self, timings: bool = False) -> dict:
        out = {
            "structural_inserts": self.structural_inserts,
            "structural_removals": self.structural_removals,
            "refreshed_by_level": {str(k): v for k, v in sorted(self.refreshed_by_level.items())},
            "calls_by_level": {str(k): v for k, v in sorted(self.calls_by_level.items())},
            "summarizer_calls": self.summarizer_calls,
            "embedder_calls": self.embedder_calls,
            "dependency_depth": self.depth,
            "trees": self.trees,
            "failed_nodes": self.failed_nodes,
            "partial": self.partial,
        }
        if timings:
            out["wall_seconds"] = {k: round(v, 6) for k, v in sorted(self.wall.items())}
        return out


def dependency_depth(stats: FlushStats) -> int:
    """Longest child-before-parent chain of summarizer calls executed by a flush."""
    return stats.depth


def _run(fn, jobs: list, parallelism: int) -> list:
    if parallelism <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _guard(fn):
    def wrapped(job):
        try:
            return True, fn(job)
        except Exception as exc:  # port failures leave the node dirty
            return False, exc
    return wrapped


def flush(trees: Iterable[MemTree], backends, resolve_text: Callable[[PayloadRef], str],
          parallelism: int = 1, node_index=None, root_index=None) -> FlushStats:
    """Refresh every dirty node of ``trees`` bottom-up and publish index rows.

    Leaves of entity/scene trees take their payload text verbatim, session
    leaves summarize their cell text, internal nodes summarize their ordered
    child summaries (a single child is passed through). Same-level nodes run
    concurrently; each level is published only after all of it completes.
    """
    trees = sorted(trees, key=lambda t: t.tree_id)
    stats = FlushStats(trees=[t.tree_id for t in trees if t.pending or t.touched or t.dropped])
    t0 = time.perf_counter()
    by_level: dict[int, list[tuple[MemTree, TreeNode]]] = defaultdict(list)
    for t in trees:
        for n in t.pending.values():
            by_level[n.level].append((t, n))
    refreshed: list[tuple[MemTree, TreeNode, TreeNode | None]] = []
    for level in sorted(by_level):
        items = sorted(by_level[level], key=lambda tn: (tn[0].tree_id, tn[1].node_id))
        passthrough, calls = [], []
        for t, n in items:
            if n.level == 0:
                if t.family == "session":
                    calls.append((t, n, [resolve_text(n.payload)]))
                else:
                    passthrough.append((t, n, resolve_text(n.payload), None))
            elif any(c.dirty for c in n.children):
                stats.failed_nodes.append(n.node_id)  # blocked behind a failed child
            elif len(n.children) == 1:
                passthrough.append((t, n, n.children[0].summary, n.children[0]))
            else:
                calls.append((t, n, [c.summary for c in n.children]))
        results = _run(_guard(lambda job: backends.summarize(job[2], job[1].interval)), calls, parallelism)
        done = 0
        for (t, n, text, src) in passthrough:
            n.summary = text
            refreshed.append((t, n, src))
            done += 1
        ncalls = 0
        for (t, n, _), (ok, out) in zip(calls, results):
            ncalls += 1
            if not ok:
                logger.warning("summarizer failed on %s/%s: %s", t.tree_id, n.node_id, out)
                stats.failed_nodes.append(n.node_id)
                continue
            n.summary = out
            refreshed.append((t, n, None))
            done += 1
        for t, n, _ in refreshed[len(refreshed) - done:]:
            n.dirty = False
            t.pending.pop(n.node_id, None)
            stats.summaries[n.node_id] = n.summary
        if done:
            stats.refreshed_by_level[level] = done
        if ncalls:
            stats.calls_by_level[level] = ncalls
            stats.summarizer_calls += ncalls
            stats.depth += 1
    t1 = time.perf_counter()

    refreshed.sort(key=lambda r: (r[1].level, r[0].tree_id, r[1].node_id))
    to_embed = [r for r in refreshed if r[2] is None or r[2].embedding is None]
    results = _run(_guard(lambda r: backends.embed(r[1].summary)), to_embed, parallelism)
    stats.embedder_calls = len(to_embed)
    embedded = {id(r[1]): res for r, res in zip(to_embed, results)}
    for t, n, src in refreshed:
        ok, vec = embedded.get(id(n), (True, None))
        if not ok:
            logger.warning("embedder failed on %s/%s: %s", t.tree_id, n.node_id, vec)
            stats.failed_nodes.append(n.node_id)
            n.embedding = None
            t.touch_leaf(n) if n.level == 0 else t._mark(n)
            continue
        n.embedding = vec if vec is not None else src.embedding.copy()
        if node_index is not None:
            node_index.put(n.node_id, t.tree_id, n.embedding, n.summary)
    t2 = time.perf_counter()

    for t in trees:
        if node_index is not None:
            for nid in sorted(t.dropped):
                node_index.delete(nid)
        t.dropped.clear()
        if root_index is not None:
            r = t.root
            if r is None:
                root_index.delete(t.tree_id)
            elif not r.dirty and r.embedding is not None:
                root_index.put(t.tree_id, t.tree_id, r.embedding, r.summary)
        t.touched = bool(t.pending)
    stats.wall = {"summaries": t1 - t0, "embeddings": t2 - t1, "index": time.perf_counter() - t2}
    return stats


def apply_updates(store, routed: list[RoutedRecord], backends, parallelism: int | None = None) -> FlushStats:
    """Group records per tree, insert in time order, then flush every touched tree once."""
    groups: dict[ScopeId, list[RoutedRecord]] = defaultdict(list)
    for r in routed:
        groups[r.scope].append(r)
    inserted = 0
    for scope in sorted(groups):
        tree = store.tree_for(scope, create=True)
        for r in sorted(groups[scope], key=lambda r: (r.anchor.start, r.anchor.end, r.payload)):
            if store.placement.leaf_in(r.payload, tree.tree_id) is not None:
                continue
            insert_leaf(tree, r, store.placement)
            inserted += 1
    stats = store.flush(backends, parallelism)
    stats.structural_inserts += inserted
    return stats
