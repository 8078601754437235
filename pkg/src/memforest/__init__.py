"""Temporal hierarchical memory: per-scope time-ordered summary trees over extracted dialogue facts."""

from .backends import Backends, build_backends
from .config import MemForestConfig, load_config
from .ingest import ingest_session, load_sessions
from .lifecycle import delete_session, merge, rematerialize
from .retrieval import retrieve
from .store import MemoryStore

__version__ = "0.1.0"

__all__ = [
    "Backends",
    "MemForestConfig",
    "MemoryStore",
    "build_backends",
    "delete_session",
    "ingest_session",
    "load_config",
    "load_sessions",
    "merge",
    "rematerialize",
    "retrieve",
]
