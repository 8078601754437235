"""Write-path benchmark scenarios, all run on mock ports and measured in port calls.

Parallel time is simulated: a level with ``m`` summarizer calls under a
budget of ``P`` workers costs ``ceil(m / P)`` time units, so the simulated
speedup of a flush is ``calls / sum_levels ceil(calls_level / P)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .backends import Backends
from .memtree import MemTree, ceil_log, flush
from .substrate import IdAllocator, PayloadRef, ScopeId, TemporalAnchor

SCENARIOS = ("lazy-vs-eager", "level-parallel", "k-sweep", "migration")
DAY = 86_400


@dataclass
class BenchResult:
    scenario: str
    columns: list[str]
    rows: list[dict]
    summary: dict = field(default_factory=dict)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"scenario": self.scenario, "columns": self.columns, "rows": self.rows, "summary": self.summary}

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        c = out / f"{self.scenario}.csv"
        j = out / f"{self.scenario}.json"
        c.write_text(self.csv())
        j.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return c, j


def fact_text(i: int) -> str:
    return f"Fact number {i} about the timeline."


def _tree(k: int, family: str = "entity") -> MemTree:
    return MemTree("T1", ScopeId(family, "bench"), k, IdAllocator().factory("N"))


def _insert(tree: MemTree, i: int, ts: int | None = None) -> None:
    tree.insert(PayloadRef("fact", f"F{i:08d}"), TemporalAnchor.point(ts if ts is not None else i * DAY, "day"))


def _text(p: PayloadRef) -> str:
    return fact_text(int(p.id[1:]))


def build_lazy(n: int, k: int, backends: Backends | None = None, parallelism: int = 1):
    """Time-ordered inserts of ``n`` facts followed by one flush; returns (tree, stats)."""
    be = backends or Backends.mock()
    tree = _tree(k)
    for i in range(n):
        _insert(tree, i)
    return tree, flush([tree], be, _text, parallelism)


def lazy_vs_eager(sizes=(16, 64, 256, 1024), k: int = 8) -> BenchResult:
    rows = []
    for n in sizes:
        be = Backends.mock()
        _, stats = build_lazy(n, k, be)
        lazy = stats.summarizer_calls
        eager_be = Backends.mock()
        tree = _tree(k)
        eager = 0
        for i in range(n):
            _insert(tree, i)
            eager += flush([tree], eager_be, _text).summarizer_calls
        rows.append({"facts": n, "k": k, "height": tree.height, "eager_calls": eager, "lazy_calls": lazy,
                     "ratio": round(eager / lazy, 6) if lazy else None})
    ratios = [r["ratio"] for r in rows]
    summary = {
        "lazy_below_eager": all(r["lazy_calls"] < r["eager_calls"] for r in rows),
        "ratio_nondecreasing": all(a <= b for a, b in zip(ratios, ratios[1:])),
    }
    return BenchResult("lazy-vs-eager", ["facts", "k", "height", "eager_calls", "lazy_calls", "ratio"], rows, summary)


def simulated_speedup(calls_by_level: dict[int, int], workers: int) -> tuple[int, int, float]:
    serial = sum(calls_by_level.values())
    parallel = sum(math.ceil(m / workers) for m in calls_by_level.values())
    return serial, parallel, (serial / parallel if parallel else 1.0)


def level_parallel(sizes=(64, 256, 1024), k: int = 8, workers: int = 16) -> BenchResult:
    rows = []
    for n in sizes:
        tree, stats = build_lazy(n, k)
        serial, par, speedup = simulated_speedup(stats.calls_by_level, workers)
        rows.append({"facts": n, "k": k, "workers": workers, "height": tree.height, "depth": stats.depth,
                     "serial_units": serial, "parallel_units": par, "speedup": round(speedup, 6)})
    sp = [r["speedup"] for r in rows]
    return BenchResult("level-parallel",
                       ["facts", "k", "workers", "height", "depth", "serial_units", "parallel_units", "speedup"],
                       rows, {"speedup_nondecreasing": all(a <= b for a, b in zip(sp, sp[1:]))})


def recall_proxy(tree: MemTree, backends: Backends, probes: int = 32, seed: int = 0,
                 beam_width: int = 2, leaf_budget: int = 10) -> float:
    """Share of probe facts whose own text, used as a query, reaches their leaf by embedding browse."""
    from .retrieval import browse_embedding

    leaves = list(tree.iter_leaves())
    rng = random.Random(seed)
    picks = rng.sample(leaves, min(probes, len(leaves)))
    hit = 0
    for leaf in picks:
        trace = browse_embedding(tree, backends.embed(_text(leaf.payload)), beam_width, leaf_budget)
        hit += any(nid == leaf.node_id for nid, _ in trace.leaves)
    return hit / len(picks) if picks else 0.0


def k_sweep(ks=(2, 4, 8, 16, 32, 64), sizes=(1024,), probes: int = 32) -> BenchResult:
    rows = []
    for n in sizes:
        for k in ks:
            be = Backends.mock()
            tree, stats = build_lazy(n, k, be)
            rows.append({"facts": n, "k": k, "height": tree.height, "expected_height": ceil_log(k, n) + 1,
                         "lazy_calls": stats.summarizer_calls, "depth": stats.depth,
                         "recall_proxy": round(recall_proxy(tree, be, probes), 6)})
    ok_h = all(r["height"] == r["expected_height"] for r in rows)
    mono = True
    for n in sizes:
        calls = [r["lazy_calls"] for r in rows if r["facts"] == n]
        mono &= all(a > b for a, b in zip(calls, calls[1:]))
    return BenchResult("k-sweep", ["facts", "k", "height", "expected_height", "lazy_calls", "depth", "recall_proxy"],
                       rows, {"heights_exact": ok_h, "calls_decreasing": mono})


DEFAULT_COSTS = {"extractor": 1.0, "summarizer": 1.0, "embedder": 1.0, "planner": 1.0, "chooser": 1.0}


def port_cost(calls: dict[str, int], costs: dict[str, float] | None = None) -> float:
    c = costs or DEFAULT_COSTS
    return sum(c.get(p, 1.0) * n for p, n in calls.items())


def _calls(be: Backends) -> dict[str, int]:
    return {p: d["calls"] for p, d in be.ledger.snapshot().items()}


def migration(instances: int = 8, costs: dict[str, float] | None = None, spec=None) -> BenchResult:
    """Cumulative cost of sequential write vs progressive merge of prebuilt instance states.

    Sequential write ingests every instance's sessions into one growing store.
    Migration pays to build the first instance, then only for merging each
    further (already materialized) instance into the accumulated state.
    """
    from .ingest import ingest_session
    from .lifecycle import merge
    from .store import MemoryStore
    from .synth import MigrationSpec, migration_instances

    spec = spec or MigrationSpec(instances=instances)
    data = migration_instances(spec)[:instances]
    seq, seq_be = MemoryStore(), Backends.mock()
    merge_be = Backends.mock()
    acc = None
    base_calls: dict[str, int] = {}
    rows = []
    for n, sessions in enumerate(data, start=1):
        for s in sessions:
            ingest_session(seq, s, seq_be)
        be = Backends.mock()
        state = MemoryStore()
        for s in sessions:
            ingest_session(state, s, be)
        if acc is None:
            acc, base_calls = state, _calls(be)
        else:
            acc, _ = merge(acc, state, merge_be)
        mig_calls = {p: base_calls[p] + c for p, c in _calls(merge_be).items()}
        seq_cost, mig_cost = port_cost(_calls(seq_be), costs), port_cost(mig_calls, costs)
        seq_facts = Counter(f.canonical_key for f in seq.facts.values())
        mig_facts = Counter(f.canonical_key for f in acc.facts.values())
        rows.append({
            "instances": n,
            "seq_cost": seq_cost,
            "mig_cost": mig_cost,
            "ratio": round(seq_cost / mig_cost, 6),
            "seq_summarizer": _calls(seq_be)["summarizer"],
            "mig_summarizer": mig_calls["summarizer"],
            "seq_facts": sum(seq_facts.values()),
            "mig_facts": sum(mig_facts.values()),
            "facts_identical": seq_facts == mig_facts,
            "seq_trees": len(seq.trees),
            "mig_trees": len(acc.trees),
        })
    ratios = [r["ratio"] for r in rows]
    peak = max(range(len(ratios)), key=lambda i: ratios[i]) if ratios else 0
    summary = {
        "peak_instances": peak + 1,
        "peak_ratio": ratios[peak] if ratios else None,
        "peak_interior": 0 < peak < len(ratios) - 1,
        "merge_cheaper_from_2": all(r["mig_cost"] < r["seq_cost"] for r in rows[1:]),
        "max_tree_gap": max((abs(r["seq_trees"] - r["mig_trees"]) / r["seq_trees"] for r in rows), default=0.0),
        "costs": costs or DEFAULT_COSTS,
    }
    return BenchResult("migration", list(rows[0]) if rows else [], rows, summary)


def run(scenario: str, **params) -> BenchResult:
    fn = {"lazy-vs-eager": lazy_vs_eager, "level-parallel": level_parallel,
          "k-sweep": k_sweep, "migration": migration}.get(scenario)
    if fn is None:
        raise ValueError(f"unknown bench scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    return fn(**params)
