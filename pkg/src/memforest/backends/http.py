"""HTTP JSON adapter for chat-completion and embedding endpoints.

Prompts live in ``prompts/<name>.v<N>.txt`` (``string.Template`` syntax).
Chat replies must be a JSON object matching the port's schema; one repair
round is attempted before giving up with :class:`PermanentBackendError`.
"""

from __future__ import annotations

import json
import logging
import os
import time
from importlib import resources
from string import Template

import httpx
import jsonschema
import numpy as np

from ..substrate import TemporalAnchor, normalize_label

logger = logging.getLogger(__name__)

PROMPT_VERSION = 1

SCHEMAS = {
    "extractor": {
        "type": "object",
        "required": ["facts"],
        "properties": {
            "facts": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["text"],
                    "properties": {
                        "text": {"type": "string", "minLength": 1},
                        "entities": {"type": "array", "items": {"type": "string"}},
                        "topics": {"type": "array", "items": {"type": "string"}},
                        "turns": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                    },
                },
            }
        },
    },
    "summarizer": {
        "type": "object",
        "required": ["summary"],
        "properties": {"summary": {"type": "string", "minLength": 1}},
    },
    "planner": {
        "type": "object",
        "required": ["subqueries"],
        "properties": {"subqueries": {"type": "object", "additionalProperties": {"type": "string"}}},
    },
    "answer": {
        "type": "object",
        "required": ["answer"],
        "properties": {"answer": {"type": "string"}},
    },
    "chooser": {
        "type": "object",
        "required": ["choice"],
        "properties": {"choice": {"anyOf": [{"type": "null"},
                                            {"type": "array", "items": {"type": "integer"}}]}},
    },
}


def load_template(name: str, version: int = PROMPT_VERSION) -> Template:
    text = resources.files(__package__).joinpath("prompts", f"{name}.v{version}.txt").read_text(encoding="utf-8")
    return Template(text)


class HttpClient:
    """Shared transport: auth header, timeouts, retry with exponential backoff."""

    def __init__(self, base_url: str, model: str | None, api_key_env: str | None = None,
                 timeout: float = 60.0, max_retries: int = 2, backoff_base: float = 0.5,
                 transport: httpx.BaseTransport | None = None):
        from . import PermanentBackendError

        if not base_url:
            raise PermanentBackendError("http backend needs base_url")
        headers = {"Content-Type": "application/json"}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if not key:
                raise PermanentBackendError(f"environment variable {api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        self.model = model
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout,
                                   transport=transport)

    def post(self, path: str, payload: dict) -> dict:
        from . import PermanentBackendError, TransientBackendError

        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self.client.post(path, json=payload)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = RuntimeError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise PermanentBackendError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise PermanentBackendError(f"{path}: response is not JSON") from exc
        raise TransientBackendError(f"{path}: {last}")


class ChatPort:
    """Base for ports whose answer is a JSON object inside a chat completion."""

    port = ""

    def __init__(self, client: HttpClient, ledger=None, template: str | None = None):
        self.client = client
        self.ledger = ledger
        self.template = load_template(template or self.default_template)
        self.schema = SCHEMAS[self.port]

    default_template = ""

    def _chat(self, messages: list[dict]) -> str:
        body = self.client.post("/chat/completions",
                                {"model": self.client.model, "messages": messages, "temperature": 0})
        usage = body.get("usage") or {}
        if self.ledger is not None and usage:
            self.ledger.add_units(self.port, usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0))
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            from . import PermanentBackendError
            raise PermanentBackendError("chat response has no choices[0].message.content") from exc

    def _parse(self, text: str) -> dict:
        body = text.strip()
        if body.startswith("```"):
            body = body.strip("`")
            body = body[body.find("{"):]
        obj = json.loads(body)
        jsonschema.validate(obj, self.schema)
        return obj

    def ask(self, **fields) -> dict:
        from . import PermanentBackendError

        prompt = self.template.substitute(**fields)
        messages = [{"role": "user", "content": prompt}]
        reply = self._chat(messages)
        try:
            return self._parse(reply)
        except (ValueError, jsonschema.ValidationError) as exc:
            problem = getattr(exc, "message", str(exc))
        messages += [{"role": "assistant", "content": reply},
                     {"role": "user", "content": f"That reply was not valid ({problem}). "
                                                 "Answer again with the JSON object only."}]
        reply = self._chat(messages)
        try:
            out = self._parse(reply)
        except (ValueError, jsonschema.ValidationError) as exc:
            raise PermanentBackendError(f"{self.port}: invalid reply after repair: {exc}") from exc
        if self.ledger is not None:
            self.ledger.add_units(self.port, repairs=1)
        return out


class HttpExtractor(ChatPort):
    port = "extractor"
    default_template = "extract"

    def extract(self, chunk):
        from ..ingest import FactCandidate

        first, last = chunk.turn_range
        obj = self.ask(session_id=chunk.session_id, interval=chunk.anchor.render(), dialogue=chunk.render(),
                       first_turn=first, last_turn=last)
        out = []
        for f in obj["facts"]:
            lo, hi = f.get("turns", [first, last])
            lo, hi = max(first, min(lo, last)), max(first, min(hi, last))
            out.append(FactCandidate(
                text=f["text"].strip(),
                anchor=chunk.anchor,
                entities=frozenset(normalize_label(e) for e in f.get("entities", []) if e.strip()),
                topics=frozenset(t.strip().lower() for t in f.get("topics", []) if t.strip()),
                first_turn=min(lo, hi),
                last_turn=max(lo, hi),
            ))
        return out


class HttpSummarizer(ChatPort):
    port = "summarizer"
    default_template = "summarize"

    def __init__(self, client, ledger=None, template=None, max_chars: int = 600):
        super().__init__(client, ledger, template)
        self.max_chars = max_chars

    def summarize(self, texts: list[str], interval: TemporalAnchor | None = None) -> str:
        entries = "\n".join(f"{i + 1}. {t}" for i, t in enumerate(texts))
        obj = self.ask(interval=interval.render() if interval else "unknown time", entries=entries,
                       max_chars=self.max_chars)
        return obj["summary"].strip()


class HttpPlanner(ChatPort):
    port = "planner"
    default_template = "plan"

    def plan(self, query: str, roots) -> dict[str, str]:
        listing = "\n".join(f"- {r.tree_id} [{r.scope}, topic {r.topic}]: {r.summary}" for r in roots)
        return dict(self.ask(query=query, roots=listing)["subqueries"])


class HttpChooser(ChatPort):
    port = "chooser"
    default_template = "choose"

    def choose(self, subquery: str, children, beam_width: int):
        listing = "\n".join(f"[{c.index}] {c.interval.render()} {'(leaf) ' if c.is_leaf else ''}{c.summary}"
                            for c in children)
        return self.ask(subquery=subquery, children=listing, beam_width=beam_width)["choice"]


class HttpEmbedder:
    port = "embedder"

    def __init__(self, client: HttpClient, dim: int, ledger=None):
        self.client = client
        self.dim = dim
        self.ledger = ledger

    def embed(self, text: str) -> np.ndarray:
        from . import PermanentBackendError

        body = self.client.post("/embeddings", {"model": self.client.model, "input": text})
        try:
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise PermanentBackendError("embedding response has no data[0].embedding") from exc
        if vec.shape != (self.dim,):
            raise PermanentBackendError(f"embedding has dimension {vec.shape}, config says {self.dim}")
        usage = body.get("usage") or {}
        if self.ledger is not None and usage:
            self.ledger.add_units("embedder", usage.get("prompt_tokens", 0), 0)
        return vec


class HttpAnswerer(ChatPort):
    """Optional pass-through: hand retrieved evidence to a chat model and return its answer."""

    port = "answer"
    default_template = "answer"

    def answer(self, query: str, evidence: list[tuple[str, str]]) -> str:
        lines = "\n".join(f"- {when} {text}" for when, text in evidence)
        return self.ask(query=query, evidence=lines or "(none)")["answer"]


def build_answerer(pc, cfg, ledger=None, transport: httpx.BaseTransport | None = None) -> HttpAnswerer:
    client = HttpClient(pc.base_url, pc.model, pc.api_key_env, pc.timeout, cfg.max_retries, cfg.backoff_base,
                        transport=transport)
    return HttpAnswerer(client, ledger)


def build_port(name: str, pc, cfg, ledger=None, transport: httpx.BaseTransport | None = None):
    client = HttpClient(pc.base_url, pc.model, pc.api_key_env, pc.timeout, cfg.max_retries, cfg.backoff_base,
                        transport=transport)
    if name == "embedder":
        return HttpEmbedder(client, pc.dim, ledger)
    cls = {"extractor": HttpExtractor, "summarizer": HttpSummarizer,
           "planner": HttpPlanner, "chooser": HttpChooser}[name]
    return cls(client, ledger, pc.template)
