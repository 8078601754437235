"""Command line entry point: ``memforest ingest|query|merge|delete|rematerialize|stats|bench``.

A store directory holds the snapshot (``snapshot/``) and a lock file that
keeps a second process out while a command runs. Exit codes: 0 success,
1 usage, 2 input error, 3 backend error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from filelock import FileLock, Timeout

from . import snapshot
from .backends import BackendError, build_backends
from .config import ConfigError, MemForestConfig, load_config
from .ingest import IngestError, load_sessions
from .lifecycle import LifecycleError
from .retrieval import MODES, NotFlushed
from .snapshot import SnapshotError

logger = logging.getLogger("memforest")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_BACKEND = 0, 1, 2, 3
LOCK_NAME = ".memforest.lock"
SNAPSHOT_DIR = "snapshot"


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# store handling
# ---------------------------------------------------------------------------


@contextmanager
def locked(store_dir: Path, timeout: float = 0.0):
    store_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(store_dir / LOCK_NAME), timeout=timeout)
    try:
        lock.acquire()
    except Timeout:
        raise InputError(f"store {store_dir} is in use by another process") from None
    try:
        yield
    finally:
        lock.release()


def open_store(store_dir: Path, config: MemForestConfig | None = None, create: bool = False):
    snap = store_dir / SNAPSHOT_DIR
    if snap.exists():
        return snapshot.load(snap)
    if not create:
        raise InputError(f"no store at {store_dir}")
    from .store import MemoryStore

    return MemoryStore(config or MemForestConfig())


def save_store(store, store_dir: Path) -> None:
    snapshot.save(store, store_dir / SNAPSHOT_DIR)


def emit(args, payload: dict, text: str | None = None) -> None:
    if args.json or text is None:
        sys.stdout.write(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text.rstrip("\n") + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args, cfg, bcfg) -> int:
    from .ingest import ingest_session

    try:
        sessions = load_sessions(args.sessions)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read sessions from {args.sessions}: {exc}") from exc
    backends = build_backends(bcfg)
    store_dir = Path(args.store)
    with locked(store_dir):
        store = open_store(store_dir, cfg, create=True)
        for s in sessions:
            if s.session_id in store.sessions:
                raise InputError(f"session {s.session_id} already ingested; delete it first")
        reports = []
        for s in sessions:
            reports.append(ingest_session(store, s, backends))
        save_store(store, store_dir)
    out = [r.to_json(timings=args.timestamps) for r in reports]
    payload = out[0] if len(out) == 1 else {"reports": out}
    text = "\n".join(f"{r.session_id}: {r.facts} new facts, {r.updated_facts} updated, "
                     f"{len(r.chunk_errors)} chunk errors" for r in reports)
    emit(args, payload, text)
    return EXIT_OK


def cmd_query(args, cfg, bcfg) -> int:
    from .retrieval import retrieve

    if args.mode not in MODES:
        raise UsageError(f"unknown mode {args.mode!r}; choose from {', '.join(MODES)}")
    backends = build_backends(bcfg)
    store_dir = Path(args.store)
    with locked(store_dir):
        store = open_store(store_dir)
    if store.dirty:
        raise InputError("flush pending: the store has trees with unrefreshed nodes")
    rcfg = store.config.retrieval
    if args.top_k is not None:
        if args.top_k < 1:
            raise UsageError("--top-k must be >= 1")
        rcfg = dataclasses.replace(rcfg, final_top_k=args.top_k)
    t0 = time.perf_counter()
    ctx = retrieve(args.query, store, backends, args.mode, rcfg)
    payload = ctx.to_json()
    if args.timestamps:
        payload["wall_seconds"] = round(time.perf_counter() - t0, 6)
    if args.answer:
        from .backends.http import build_answerer

        if bcfg.summarizer.kind != "http":
            raise UsageError("--answer needs an http summarizer backend to talk to")
        answerer = build_answerer(bcfg.summarizer, bcfg, backends.ledger)
        payload["answer"] = answerer.answer(
            args.query, [(e.anchor.render() if e.anchor is not None else "", e.text) for e in ctx.evidence])
    text = "\n".join(f"{e.score:.4f} {e.anchor.render() if e.anchor else ''} {e.text}" for e in ctx.evidence)
    if args.answer:
        text += f"\nanswer: {payload['answer']}"
    emit(args, payload, text or "(no evidence)")
    return EXIT_OK


def cmd_merge(args, cfg, bcfg) -> int:
    from .lifecycle import merge

    backends = build_backends(bcfg)
    a_dir, b_dir = Path(args.store), Path(args.other)
    out_dir = Path(args.out) if args.out else a_dir
    with locked(a_dir), locked(b_dir):
        a, b = open_store(a_dir), open_store(b_dir)
        merged, report = merge(a, b, backends)
    with locked(out_dir):
        save_store(merged, out_dir)
    payload = report.to_json(timings=args.timestamps)
    emit(args, payload, f"merged: {report.facts_added} facts added, {report.facts_reconciled} reconciled, "
                        f"{report.trees_copied} trees copied")
    return EXIT_OK


def cmd_delete(args, cfg, bcfg) -> int:
    from .lifecycle import delete_session

    backends = build_backends(bcfg)
    store_dir = Path(args.store)
    with locked(store_dir):
        store = open_store(store_dir)
        report = delete_session(store, args.session_id, backends)
        save_store(store, store_dir)
    emit(args, report.to_json(), f"deleted {args.session_id}: {len(report.invalidated)} facts invalidated, "
                                 f"{len(report.dropped_trees)} trees dropped")
    return EXIT_OK


def cmd_rematerialize(args, cfg, bcfg) -> int:
    from .lifecycle import rematerialize

    backends = build_backends(bcfg)
    store_dir = Path(args.store)
    with locked(store_dir):
        store = open_store(store_dir)
        new = store.config if args.config is None else cfg
        tree = new.tree
        if args.k is not None:
            tree = dataclasses.replace(tree, k_session=args.k, k_entity=args.k, k_scene=args.k)
        for fam in ("session", "entity", "scene"):
            v = getattr(args, f"k_{fam}")
            if v is not None:
                tree = dataclasses.replace(tree, **{f"k_{fam}": v})
        new = dataclasses.replace(new, tree=tree)
        try:
            new.validate()
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
        report = rematerialize(store, new, backends, args.embedder_changed, args.summarizer_changed)
        save_store(store, store_dir)
    emit(args, report.to_json(), f"rematerialized: {len(report.rebuilt_trees)} trees rebuilt")
    return EXIT_OK


def cmd_stats(args, cfg, bcfg) -> int:
    from .memtree import height_bound

    store_dir = Path(args.store)
    with locked(store_dir):
        store = open_store(store_dir)
    payload = store.stats()
    code = EXIT_OK
    if args.check:
        problems = list(store.check())
        for t in store.trees.values():
            if t.height > height_bound(t.k, t.leaf_count):
                problems.append(f"{t.tree_id}: height {t.height} exceeds bound {height_bound(t.k, t.leaf_count)}")
        payload["problems"] = problems
        code = EXIT_INPUT if problems else EXIT_OK
    text = "\n".join(f"{k}: {v}" for k, v in payload.items() if not isinstance(v, (dict, list)))
    emit(args, payload, text)
    return code


def _param(s: str):
    if "=" not in s:
        raise argparse.ArgumentTypeError(f"expected key=value, got {s!r}")
    k, v = s.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def cmd_bench(args, cfg, bcfg) -> int:
    from .bench import SCENARIOS, run

    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    params = dict(args.param or [])
    for k, v in params.items():
        if isinstance(v, list):
            params[k] = tuple(v)
    t0 = time.perf_counter()
    try:
        result = run(args.scenario, **params)
    except TypeError as exc:
        raise UsageError(f"bad parameter for {args.scenario}: {exc}") from exc
    payload = result.to_json()
    if args.timestamps:
        payload["wall_seconds"] = round(time.perf_counter() - t0, 6)
    if args.out:
        result.write(args.out)
    emit(args, payload, result.csv())
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "query": cmd_query,
    "merge": cmd_merge,
    "delete": cmd_delete,
    "rematerialize": cmd_rematerialize,
    "stats": cmd_stats,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (engine and backend settings)")
    common.add_argument("--json", action="store_true", help="print the full JSON report")
    common.add_argument("--timestamps", action="store_true", help="add wall-clock fields to reports")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="memforest", description="Temporal hierarchical memory over dialogue sessions.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="ingest a session file into a store")
    s.add_argument("--store", required=True)
    s.add_argument("sessions", help="session JSON file")

    s = sub.add_parser("query", parents=[common], help="retrieve evidence for a question")
    s.add_argument("--store", required=True)
    s.add_argument("query")
    s.add_argument("--mode", default="llm+planner", help=f"one of {', '.join(MODES)}")
    s.add_argument("--top-k", type=int, default=None)
    s.add_argument("--answer", action="store_true", help="forward the evidence to the chat backend")

    s = sub.add_parser("merge", parents=[common], help="merge a second store into the first")
    s.add_argument("--store", required=True)
    s.add_argument("other")
    s.add_argument("--out", help="write the merged store here instead of over --store")

    s = sub.add_parser("delete", parents=[common], help="remove one session and everything derived from it")
    s.add_argument("--store", required=True)
    s.add_argument("session_id")

    s = sub.add_parser("rematerialize", parents=[common], help="rebuild derived state under a new config")
    s.add_argument("--store", required=True)
    s.add_argument("--k", type=int, help="branching factor for every tree family")
    for fam in ("session", "entity", "scene"):
        s.add_argument(f"--k-{fam}", type=int, dest=f"k_{fam}")
    s.add_argument("--embedder-changed", action="store_true")
    s.add_argument("--summarizer-changed", action="store_true")

    s = sub.add_parser("stats", parents=[common], help="store statistics")
    s.add_argument("--store", required=True)
    s.add_argument("--check", action="store_true", help="verify tree and index invariants")

    s = sub.add_parser("bench", parents=[common], help="write-path benchmark on mock ports")
    s.add_argument("scenario")
    s.add_argument("--out", help="directory for <scenario>.csv and <scenario>.json")
    s.add_argument("--param", action="append", type=_param, metavar="KEY=VALUE")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, bcfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg, bcfg)
    except UsageError as exc:
        print(f"memforest: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"memforest: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (InputError, ConfigError, IngestError, NotFlushed, SnapshotError, LifecycleError) as exc:
        print(f"memforest: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
