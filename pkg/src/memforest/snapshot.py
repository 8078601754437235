"""Directory snapshots of a :class:`MemoryStore`.

Layout (every ``.jsonl`` file opens with a header record)::

    meta.json          counters, config, deferred scene facts
    sessions.jsonl     facts.jsonl  cells.jsonl  placement.jsonl  registry.jsonl
    trees.jsonl        one record per tree with all of its nodes
    scenes.jsonl       clusters in creation order
    fact_index.jsonl   FactIndex row metadata
    embeddings.bin     every vector, keyed by a short string id

Writes are deterministic (sorted keys, fixed record order, raw little-endian
float64 vectors) so saving a loaded snapshot reproduces it byte for byte.
NodeIndex and RootIndex are rebuilt from node embeddings on load.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from .config import engine_config_from_dict, engine_config_to_dict
from .memtree import MemTree, TreeNode
from .router import SceneCluster
from .substrate import (
    CanonicalFact,
    DialogueCell,
    IdAllocator,
    PayloadRef,
    ScopeId,
    Session,
    SessionArtifacts,
    TemporalAnchor,
)

FORMAT = "memforest-snapshot"
VERSION = 1
MAGIC = b"MFVEC\x00\x01\x00"
FILES = ("sessions", "facts", "cells", "placement", "registry", "trees", "scenes", "fact_index")


class SnapshotError(RuntimeError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _header(kind: str) -> dict:
    return {"kind": "header", "format": FORMAT, "version": VERSION, "file": kind}


def _write_jsonl(path: Path, kind: str, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(_header(kind)) + "\n")
        for r in records:
            fh.write(_dumps(r) + "\n")


def _read_jsonl(path: Path, kind: str) -> list[dict]:
    if not path.exists():
        raise SnapshotError(f"snapshot is missing {path.name}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SnapshotError(f"{path.name} is empty")
    head = json.loads(lines[0])
    if head.get("kind") != "header" or head.get("format") != FORMAT:
        raise SnapshotError(f"{path.name} is not a {FORMAT} file")
    if head.get("version") != VERSION:
        raise SnapshotError(f"{path.name} has snapshot version {head.get('version')}, expected {VERSION}")
    return [json.loads(line) for line in lines[1:] if line.strip()]


class _Vectors:
    def __init__(self):
        self.rows: dict[str, np.ndarray] = {}

    def add(self, key: str, vec) -> None:
        if vec is not None:
            self.rows[key] = np.asarray(vec, dtype="<f8")

    def dump(self, path: Path) -> None:
        dims = {v.shape[0] for v in self.rows.values()}
        if len(dims) > 1:
            raise SnapshotError(f"mixed embedding dimensions {sorted(dims)}")
        dim = dims.pop() if dims else 0
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", VERSION, dim, len(self.rows)))
            for key in sorted(self.rows):
                raw = key.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(self.rows[key].astype("<f8").tobytes())

    @classmethod
    def load(cls, path: Path) -> _Vectors:
        out = cls()
        data = path.read_bytes()
        if data[:len(MAGIC)] != MAGIC:
            raise SnapshotError("embeddings.bin has a bad magic number")
        version, dim, count = struct.unpack_from("<III", data, len(MAGIC))
        if version != VERSION:
            raise SnapshotError(f"embeddings.bin has version {version}, expected {VERSION}")
        pos = len(MAGIC) + 12
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            key = data[pos:pos + n].decode("utf-8")
            pos += n
            out.rows[key] = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(np.float64)
            pos += 8 * dim
        if pos != len(data):
            raise SnapshotError("embeddings.bin has trailing bytes")
        return out


def _tree_record(tree: MemTree, vecs: _Vectors) -> dict:
    nodes = []
    for n in tree.iter_nodes():
        vecs.add(f"node:{n.node_id}", n.embedding)
        nodes.append({
            "id": n.node_id,
            "level": n.level,
            "children": [c.node_id for c in n.children],
            "payload": str(n.payload) if n.payload is not None else None,
            "seq": n.seq,
            "interval": n.interval.to_json(),
            "summary": n.summary,
            "dirty": n.dirty,
        })
    return {
        "tree_id": tree.tree_id,
        "scope": str(tree.scope),
        "k": tree.k,
        "seq": tree._seq,
        "repacks": tree.repacks,
        "touched": tree.touched,
        "root": tree.root.node_id if tree.root is not None else None,
        "dropped": sorted(tree.dropped),
        "nodes": nodes,
    }


def save(store, path: str | Path) -> Path:
    """Write ``store`` to directory ``path`` (replaced atomically if it exists)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        vecs = _Vectors()
        meta = {
            **_header("meta"),
            "counters": dict(sorted(store.ids.counters.items())),
            "arrivals": store.arrivals,
            "config": engine_config_to_dict(store.config),
            "deferred_scene": sorted(store.scenes.pending),
        }
        (tmp / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        _write_jsonl(tmp / "sessions.jsonl", "sessions",
                     (store.sessions[s].to_json() for s in sorted(store.sessions)))
        _write_jsonl(tmp / "facts.jsonl", "facts", (store.facts[f].to_json() for f in sorted(store.facts)))
        _write_jsonl(tmp / "cells.jsonl", "cells", (store.cells[c].to_json() for c in sorted(store.cells)))
        _write_jsonl(tmp / "placement.jsonl", "placement",
                     ({"payload": str(p), "leaves": sorted([list(e) for e in v])} for p, v in store.placement.items()))
        _write_jsonl(tmp / "registry.jsonl", "registry",
                     ({"session_id": sid, **art.to_json()} for sid, art in store.registry.items()))
        _write_jsonl(tmp / "trees.jsonl", "trees",
                     (_tree_record(store.trees[t], vecs) for t in sorted(store.trees)))
        scenes = []
        for cid, c in store.scenes.clusters.items():
            vecs.add(f"centroid:{cid}", c.centroid)
            for fid, v in c.members.items():
                vecs.add(f"member:{cid}:{fid}", v)
            scenes.append(c.to_json() | {"centroid": None})
        _write_jsonl(tmp / "scenes.jsonl", "scenes", scenes)
        rows = []
        for row in store.fact_index.rows():
            vecs.add(f"fact:{row.key}", row.vector)
            rows.append({"key": row.key, "owner": row.owner, "text": row.text})
        _write_jsonl(tmp / "fact_index.jsonl", "fact_index", rows)
        vecs.dump(tmp / "embeddings.bin")
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _load_tree(rec: dict, ids: IdAllocator, vecs: _Vectors) -> MemTree:
    tree = MemTree(rec["tree_id"], ScopeId.parse(rec["scope"]), rec["k"], ids.factory("N"))
    tree._seq = rec["seq"]
    tree.repacks = rec["repacks"]
    tree.dropped = set(rec["dropped"])
    nodes = {}
    for d in rec["nodes"]:
        n = TreeNode(d["id"], d["level"])
        n.payload = PayloadRef.parse(d["payload"]) if d["payload"] is not None else None
        n.seq = d["seq"]
        n.interval = TemporalAnchor.from_json(d["interval"])
        n.summary = d["summary"]
        n.dirty = d["dirty"]
        row = vecs.rows.get(f"node:{n.node_id}")
        n.embedding = None if row is None else row.copy()
        nodes[n.node_id] = n
    for d in rec["nodes"]:
        n = nodes[d["id"]]
        n.children = [nodes[c] for c in d["children"]]
        for c in n.children:
            c.parent = n
    tree.nodes = nodes
    tree.pending = {nid: n for nid, n in sorted(nodes.items()) if n.dirty}
    tree.root = nodes[rec["root"]] if rec["root"] is not None else None
    for n in sorted(nodes.values(), key=lambda x: x.level):
        tree._refresh_struct(n)
    tree.leaf_count = sum(1 for n in nodes.values() if n.level == 0)
    tree.touched = rec["touched"]
    return tree


def load(path: str | Path):
    """Rebuild a store from a snapshot directory; indexes are regenerated from stored vectors."""
    from .store import MemoryStore

    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise SnapshotError(f"{path} is not a snapshot directory (no meta.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format") != FORMAT:
        raise SnapshotError(f"{path} is not a {FORMAT} directory")
    if meta.get("version") != VERSION:
        raise SnapshotError(f"snapshot version {meta.get('version')} is not supported (expected {VERSION})")
    store = MemoryStore(engine_config_from_dict(meta["config"]))
    store.ids = IdAllocator(meta["counters"])
    store.arrivals = meta["arrivals"]
    vecs = _Vectors.load(path / "embeddings.bin")

    for d in _read_jsonl(path / "sessions.jsonl", "sessions"):
        s = Session.from_json(d)
        store.sessions[s.session_id] = s
    for d in _read_jsonl(path / "facts.jsonl", "facts"):
        store.put_fact(CanonicalFact.from_json(d))
    for d in _read_jsonl(path / "cells.jsonl", "cells"):
        c = DialogueCell.from_json(d)
        store.cells[c.cell_id] = c
    for d in _read_jsonl(path / "placement.jsonl", "placement"):
        p = PayloadRef.parse(d["payload"])
        for tid, leaf in d["leaves"]:
            store.placement.add(p, tid, leaf)
    for d in _read_jsonl(path / "registry.jsonl", "registry"):
        store.registry.set(d["session_id"], SessionArtifacts.from_json(d))
    for d in _read_jsonl(path / "trees.jsonl", "trees"):
        tree = _load_tree(d, store.ids, vecs)
        store.trees[tree.tree_id] = tree
        store.scope_tree[tree.scope] = tree.tree_id
    store.scenes.pending = set(meta["deferred_scene"])
    for d in _read_jsonl(path / "scenes.jsonl", "scenes"):
        cid = d["cluster_id"]
        c = SceneCluster(cid, vecs.rows[f"centroid:{cid}"].copy(), topics=Counter(d["topics"]))
        for fid in d["members"]:
            c.members[fid] = vecs.rows[f"member:{cid}:{fid}"].copy()
            store.scenes.fact_scene[fid] = cid
        store.scenes.clusters[cid] = c
    for d in _read_jsonl(path / "fact_index.jsonl", "fact_index"):
        store.fact_index.put(d["key"], d["owner"], vecs.rows[f"fact:{d['key']}"], d["text"])
    for tid in sorted(store.trees):
        tree = store.trees[tid]
        for n in tree.iter_nodes():
            if not n.dirty and n.embedding is not None:
                store.node_index.put(n.node_id, tid, n.embedding, n.summary)
        r = tree.root
        if r is not None and not r.dirty and r.embedding is not None:
            store.root_index.put(tid, tid, r.embedding, r.summary)
    return store


def files_equal(a: str | Path, b: str | Path) -> bool:
    """Byte equality of two snapshot directories."""
    a, b = Path(a), Path(b)
    names = sorted(p.name for p in a.iterdir())
    if names != sorted(p.name for p in b.iterdir()):
        return False
    return all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
