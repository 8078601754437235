import random
import socket
import sys

import pytest

from helpers import bob_backends, build_store
from memforest.synth import bob_sessions, random_sessions


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Refuse outbound connections except to loopback (used by the HTTP stub tests)."""
    real = socket.socket.connect

    def guarded(self, address):
        host = address[0] if isinstance(address, tuple) else address
        if isinstance(host, str) and host not in ("127.0.0.1", "localhost", "::1"):
            raise OSError(f"network access blocked in tests: {address}")
        return real(self, address)

    monkeypatch.setattr(socket.socket, "connect", guarded)


@pytest.fixture
def bob_store():
    be = bob_backends()
    return build_store(bob_sessions(), be), be


@pytest.fixture
def small_store():
    return build_store(random_sessions(random.Random(3), 15))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
