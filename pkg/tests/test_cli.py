import json
import subprocess
import sys

import pytest
from filelock import FileLock

from memforest.cli import LOCK_NAME, SNAPSHOT_DIR, main
from memforest.memtree import height_bound
from memforest.snapshot import files_equal, load
from memforest.synth import (BOB_DAVIS, BOB_QUERY, bob_chooser_script, bob_embedding_overrides, bob_planner_script,
                             bob_sessions)


@pytest.fixture
def bob_files(tmp_path):
    def dump(name, obj):
        p = tmp_path / name
        p.write_text(json.dumps(obj))
        return str(p)

    sessions = dump("bob.json", {"sessions": [s.to_json() for s in bob_sessions()]})
    cfg = dump("cfg.json", {"backends": {
        "embedder": {"overrides": dump("emb.json", bob_embedding_overrides())},
        "planner": {"kind": "scripted", "script": dump("plan.json", bob_planner_script())},
        "chooser": {"kind": "scripted", "script": dump("choose.json", bob_chooser_script())}}})
    return tmp_path, sessions, cfg


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_ingest_query_and_exit_codes(bob_files, capsys):
    tmp, sessions, cfg = bob_files
    store = str(tmp / "store")
    code, out, _ = run(capsys, "ingest", "--store", store, "--config", cfg, "--json", sessions)
    assert code == 0 and sum(r["facts"] for r in json.loads(out)["reports"]) > 0

    code, _, err = run(capsys, "ingest", "--store", store, "--config", cfg, sessions)
    assert code == 2 and "already ingested" in err

    code, out, _ = run(capsys, "query", "--store", store, "--config", cfg, "--json", "--mode", "llm+planner", BOB_QUERY)
    assert code == 0 and BOB_DAVIS in [e["text"] for e in json.loads(out)["evidence"]]

    code, out, _ = run(capsys, "query", "--store", store, "--config", cfg, "--json", "--mode", "flat",
                       "--top-k", "10", BOB_QUERY)
    assert code == 0 and len(json.loads(out)["evidence"]) <= 10

    code, _, _ = run(capsys, "query", "--store", store, "--mode", "telepathy", "q")
    assert code == 1


def test_ingest_is_deterministic(bob_files, capsys):
    tmp, sessions, cfg = bob_files
    for name in ("s1", "s2"):
        assert run(capsys, "ingest", "--store", str(tmp / name), "--config", cfg, sessions)[0] == 0
    assert files_equal(tmp / "s1" / SNAPSHOT_DIR, tmp / "s2" / SNAPSHOT_DIR)


def test_delete_unknown_and_rematerialize(bob_files, capsys, caplog):
    tmp, sessions, cfg = bob_files
    store = str(tmp / "store")
    run(capsys, "ingest", "--store", store, "--config", cfg, sessions)
    code, _, _ = run(capsys, "delete", "--store", store, "no-such-session")
    assert code == 0 and "not in the store" in caplog.text
    code, out, _ = run(capsys, "rematerialize", "--store", store, "--k", "4", "--json")
    assert code == 0 and json.loads(out)["port_calls"]["extractor"] == 0
    s = load(tmp / "store" / SNAPSHOT_DIR)
    assert all(t.k == 4 and t.height <= height_bound(4, t.leaf_count) for t in s.trees.values())
    code, out, _ = run(capsys, "stats", "--store", store, "--check", "--json")
    assert code == 0 and json.loads(out)["problems"] == []


def test_merge_costs_less_than_sequential(tmp_path, capsys):
    from memforest.synth import MigrationSpec, migration_instances

    a, b = migration_instances(MigrationSpec(instances=2, sessions_per_instance=6))
    files = []
    for name, part in (("a", a), ("b", b), ("ab", a + b)):
        p = tmp_path / f"{name}.json"
        p.write_text(json.dumps({"sessions": [s.to_json() for s in part]}))
        files.append(str(p))
    for name, f in zip(("A", "B", "SEQ"), files):
        assert run(capsys, "ingest", "--store", str(tmp_path / name), f)[0] == 0
    seq = sum(r["port_calls"]["summarizer"] for r in json.loads(
        run(capsys, "ingest", "--store", str(tmp_path / "SEQ2"), "--json", files[2])[1])["reports"])
    code, out, _ = run(capsys, "merge", "--store", str(tmp_path / "A"), str(tmp_path / "B"),
                       "--out", str(tmp_path / "M"), "--json")
    assert code == 0 and json.loads(out)["port_calls"]["summarizer"] < seq
    assert (tmp_path / "M" / SNAPSHOT_DIR / "meta.json").exists()


def test_bench_writes_csv_and_json(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "lazy-vs-eager", "--out", str(tmp_path), "--param", "sizes=[16,64]")
    assert code == 0
    header = (tmp_path / "lazy-vs-eager.csv").read_text().splitlines()[0]
    assert header == "facts,k,height,eager_calls,lazy_calls,ratio"
    assert json.loads((tmp_path / "lazy-vs-eager.json").read_text())["summary"]["lazy_below_eager"]
    assert run(capsys, "bench", "nonsense")[0] == 1


def test_missing_store_and_bad_config(tmp_path, capsys):
    assert run(capsys, "query", "--store", str(tmp_path / "none"), "q")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"memforest": {"chunk_size": 0}}')
    assert run(capsys, "stats", "--store", str(tmp_path), "--config", str(bad))[0] == 2


def test_store_lock_excludes_a_second_process(bob_files, capsys):
    tmp, sessions, cfg = bob_files
    store = tmp / "store"
    store.mkdir()
    with FileLock(str(store / LOCK_NAME)):
        code, _, err = run(capsys, "ingest", "--store", str(store), sessions)
    assert code == 2 and "in use" in err


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "memforest", "bench", "k-sweep", "--param", "ks=[2,4]",
                          "--param", "sizes=[32]"], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("facts,k,height,expected_height")


def test_query_refuses_a_store_with_pending_refresh(bob_files, capsys):
    from memforest.memtree import mark_dirty_ancestors
    from memforest.snapshot import save

    tmp, sessions, cfg = bob_files
    store = tmp / "store"
    run(capsys, "ingest", "--store", str(store), "--config", cfg, sessions)
    s = load(store / SNAPSHOT_DIR)
    tree = next(t for t in s.trees.values() if t.leaf_count > 1)
    mark_dirty_ancestors(tree, next(tree.iter_leaves()).node_id)
    save(s, store / SNAPSHOT_DIR)
    code, _, err = run(capsys, "query", "--store", str(store), "--config", cfg, BOB_QUERY)
    assert code == 2 and "flush pending" in err
