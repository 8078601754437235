from __future__ import annotations

import threading
from dataclasses import asdict, dataclass

PORTS = ("extractor", "summarizer", "embedder", "planner", "chooser")


@dataclass
class PortStats:
    calls: int = 0
    input_units: int = 0
    output_units: int = 0
    failures: int = 0
    repairs: int = 0


class PortCallLedger:
    """Thread-safe per-port call counters, optionally with a per-call log."""

    def __init__(self, keep_log: bool = False):
        self._lock = threading.Lock()
        self._stats = {p: PortStats() for p in PORTS}
        self.keep_log = keep_log
        self.log: list[dict] = []

    def record(self, port: str, input_units: int = 0, output_units: int = 0,
               failed: bool = False, repaired: bool = False) -> None:
        with self._lock:
            s = self._stats.setdefault(port, PortStats())
            s.calls += 1
            s.input_units += input_units
            s.output_units += output_units
            s.failures += int(failed)
            s.repairs += int(repaired)
            if self.keep_log:
                self.log.append({"port": port, "in": input_units, "out": output_units, "failed": failed})

    def add_units(self, port: str, input_units: int = 0, output_units: int = 0, repairs: int = 0) -> None:
        """Extra accounting for a call already recorded (token usage, repair rounds)."""
        with self._lock:
            s = self._stats.setdefault(port, PortStats())
            s.input_units += input_units
            s.output_units += output_units
            s.repairs += repairs

    def calls(self, port: str) -> int:
        return self._stats[port].calls

    def successful_calls(self, port: str) -> int:
        s = self._stats[port]
        return s.calls - s.failures

    def snapshot(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {p: asdict(s) for p, s in self._stats.items()}

    def total_calls(self) -> int:
        return sum(s.calls for s in self._stats.values())

    def reset(self) -> None:
        with self._lock:
            self._stats = {p: PortStats() for p in PORTS}
            self.log.clear()


def ledger_delta(after: dict, before: dict) -> dict[str, dict[str, int]]:
    return {p: {f: after[p][f] - before.get(p, {}).get(f, 0) for f in after[p]} for p in after}
