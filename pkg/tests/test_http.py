"""HTTP adapter against a loopback stub server with canned responses."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from memforest.backends import Backends, PermanentBackendError, TransientBackendError
from memforest.backends.http import build_port
from memforest.backends.ledger import PortCallLedger
from memforest.config import BackendConfig, PortConfig
from memforest.ingest import partition
from memforest.substrate import Session, TemporalAnchor


class Stub:
    def __init__(self):
        self.replies = []  # list of (status, body or None, delay)
        self.requests = []
        handler = self._handler()
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def _handler(self):
        stub = self

        class H(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                stub.requests.append((self.path, json.loads(self.rfile.read(n)), dict(self.headers)))
                status, body, delay = stub.replies.pop(0) if stub.replies else (500, {"error": "empty"}, 0)
                if delay:
                    time.sleep(delay)
                data = json.dumps(body).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except OSError:
                    pass

        return H

    def chat(self, content, usage=None, status=200, delay=0):
        body = {"choices": [{"message": {"role": "assistant", "content": content}}]}
        if usage:
            body["usage"] = usage
        self.replies.append((status, body, delay))

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub():
    s = Stub()
    yield s
    s.close()


def _cfg(stub, **kw):
    pc = PortConfig(kind="http", base_url=stub.url, model="m", timeout=kw.pop("timeout", 2.0), dim=4, **kw)
    return pc, BackendConfig(max_retries=kw.pop("max_retries", 0), backoff_base=0.01)


def _backends(name, pc, cfg):
    ledger = PortCallLedger()
    return Backends(**{name: build_port(name, pc, cfg, ledger)}, ledger=ledger)


def _chunk():
    s = Session.from_json({"session_id": "s", "timestamp": "2024-07-20", "turns": [
        {"role": "user", "content": "Bob moved from Davis to Miami."}, {"role": "assistant", "content": "Nice."}]})
    return partition(s, 2)[0]


CANNED = {"facts": [{"text": "Bob moved from Davis to Miami.", "entities": ["Bob", "Miami"],
                     "topics": ["residence"], "turns": [1, 1]}]}


def test_extractor_parses_canned_reply(stub):
    pc, cfg = _cfg(stub)
    be = _backends("extractor", pc, cfg)
    stub.chat(json.dumps(CANNED), usage={"prompt_tokens": 40, "completion_tokens": 12})
    (c,) = be.extract(_chunk())
    assert c.text == CANNED["facts"][0]["text"]
    assert c.entities == {"bob", "miami"} and c.topics == {"residence"}
    assert (c.first_turn, c.last_turn) == (1, 1)
    path, body, _ = stub.requests[0]
    assert path == "/v1/chat/completions" and body["model"] == "m" and body["temperature"] == 0
    assert "Bob moved from Davis to Miami." in body["messages"][0]["content"]
    assert be.ledger.snapshot()["extractor"]["output_units"] >= 12


def test_timeout_is_transient_and_counted(stub):
    pc, cfg = _cfg(stub, timeout=0.2)
    be = _backends("summarizer", pc, cfg)
    stub.chat(json.dumps({"summary": "late"}), delay=1.0)
    with pytest.raises(TransientBackendError):
        be.summarize(["a"], TemporalAnchor(0, 0))
    assert be.ledger.snapshot()["summarizer"]["failures"] == 1


def test_retry_then_success_on_5xx(stub):
    pc, _ = _cfg(stub)
    cfg = BackendConfig(max_retries=2, backoff_base=0.01)
    be = _backends("summarizer", pc, cfg)
    stub.replies.append((503, {"error": "busy"}, 0))
    stub.chat(json.dumps({"summary": "fine"}))
    assert be.summarize(["a"]) == "fine"
    assert len(stub.requests) == 2


def test_client_error_is_permanent(stub):
    pc, cfg = _cfg(stub)
    be = _backends("summarizer", pc, cfg)
    stub.replies.append((400, {"error": "bad"}, 0))
    with pytest.raises(PermanentBackendError):
        be.summarize(["a"])


def test_malformed_then_valid_counts_a_repair(stub):
    pc, cfg = _cfg(stub)
    be = _backends("planner", pc, cfg)
    stub.chat("here you go: {not json")
    stub.chat(json.dumps({"subqueries": {"T1": "residence before Miami"}}))
    assert be.plan("q", []) == {"T1": "residence before Miami"}
    snap = be.ledger.snapshot()["planner"]
    assert snap["calls"] == 1 and snap["repairs"] == 1 and snap["failures"] == 0
    assert len(stub.requests[1][1]["messages"]) == 3


def test_invalid_twice_is_permanent(stub):
    pc, cfg = _cfg(stub)
    be = _backends("chooser", pc, cfg)
    stub.chat(json.dumps({"choice": "left"}))
    stub.chat(json.dumps({"pick": 1}))
    with pytest.raises(PermanentBackendError):
        be.choose("q", [], 2)


def test_embedder_reads_vector_and_checks_dim(stub):
    pc, cfg = _cfg(stub)
    be = _backends("embedder", pc, cfg)
    stub.replies.append((200, {"data": [{"embedding": [3.0, 4.0, 0.0, 0.0]}]}, 0))
    v = be.embed("hi")
    assert np.allclose(v, [0.6, 0.8, 0, 0])
    stub.replies.append((200, {"data": [{"embedding": [1.0, 0.0]}]}, 0))
    with pytest.raises(PermanentBackendError):
        be.embed("hi")


def test_api_key_comes_from_env(stub, monkeypatch):
    monkeypatch.setenv("MF_TEST_KEY", "sekret")
    pc, cfg = _cfg(stub, api_key_env="MF_TEST_KEY")
    port = build_port("summarizer", pc, cfg)
    stub.chat(json.dumps({"summary": "ok"}))
    port.summarize(["a"])
    assert stub.requests[0][2]["Authorization"] == "Bearer sekret"
    monkeypatch.delenv("MF_TEST_KEY")
    with pytest.raises(PermanentBackendError):
        build_port("summarizer", pc, cfg)
