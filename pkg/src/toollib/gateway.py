"""Chat-completion and embedding access behind two configured roles.

Every call is fingerprinted over (role slot, template id, binding values), so
a scripted backend can replay a whole pipeline run deterministically and a
byte-identical request always maps to the same script entry.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import canonical_json


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Transient transport failure; retried with backoff."""


class UnscriptedRequestError(GatewayError):
    """Scripted backend has no (remaining) entry for this fingerprint."""

    def __init__(self, fingerprint: str, template_id: str = "") -> None:
        super().__init__(
            f"unscripted request: fingerprint={fingerprint} template={template_id or '?'}"
        )
        self.fingerprint = fingerprint


@dataclass(frozen=True)
class ChatMessage:
    speaker: str  # system | user | assistant | tool
    content: str


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: str  # JSON text


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_tokens: int = 4096


@dataclass
class ChatRequest:
    role_slot: str  # general | solver
    messages: list[ChatMessage]
    tools_offered: list[dict] | None = None
    decoding: Decoding = field(default_factory=Decoding)
    # Fingerprint salience: the template this prompt was rendered from and the
    # values bound into it. Scripts key on these, not on the rendered text.
    template_id: str = ""
    bindings: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.role_slot not in ("general", "solver"):
            raise GatewayError(f"unknown role slot {self.role_slot!r}")
        if not self.messages:
            raise GatewayError("request must carry at least one message")
        if self.decoding.temperature < 0:
            raise GatewayError("temperature must be >= 0")


@dataclass(frozen=True)
class Completion:
    text: str
    tool_calls: tuple[ToolCall, ...] = ()

    def to_dict(self) -> dict:
        out: dict = {"text": self.text}
        if self.tool_calls:
            out["tool_calls"] = [
                {"name": c.name, "arguments": c.arguments} for c in self.tool_calls
            ]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Completion":
        calls = tuple(
            ToolCall(name=str(c["name"]), arguments=str(c["arguments"]))
            for c in data.get("tool_calls", [])
        )
        return cls(text=str(data.get("text", "")), tool_calls=calls)


def fingerprint(role_slot: str, template_id: str, bindings: dict[str, str]) -> str:
    bound = hashlib.sha256(canonical_json(bindings).encode("utf-8")).hexdigest()
    return hashlib.sha256(
        f"{role_slot}\n{template_id}\n{bound}".encode("utf-8")
    ).hexdigest()


def request_fingerprint(request: ChatRequest) -> str:
    return fingerprint(request.role_slot, request.template_id, request.bindings)


class ScriptedBackend:
    """Replays canned completions keyed by request fingerprint.

    Script files are JSON-Lines: one object per entry with keys
    ``match_key``, ``response`` ({"text": ...} and optional "tool_calls"),
    and ``remaining_uses`` (integer, or null for unlimited).
    """

    def __init__(self, entries: dict[str, tuple[Completion, int | None]]) -> None:
        self._entries = entries
        self._lock = threading.Lock()

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ScriptedBackend":
        entries: dict[str, tuple[Completion, int | None]] = {}
        for line_no, line in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            record = json.loads(line)
            key = str(record["match_key"])
            if key in entries:
                raise GatewayError(f"{path}:{line_no}: duplicate match_key {key}")
            uses = record.get("remaining_uses")
            entries[key] = (
                Completion.from_dict(record["response"]),
                None if uses is None else int(uses),
            )
        return cls(entries)

    def complete(self, request: ChatRequest) -> Completion:
        key = request_fingerprint(request)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                raise UnscriptedRequestError(key, request.template_id)
            completion, uses = entry
            if uses is not None:
                if uses <= 0:
                    raise UnscriptedRequestError(key, request.template_id)
                self._entries[key] = (completion, uses - 1)
        return completion


class CallableBackend:
    """Adapter for programmable backends in tests and fixture authoring."""

    def __init__(self, fn) -> None:
        self._fn = fn

    def complete(self, request: ChatRequest) -> Completion:
        result = self._fn(request)
        if isinstance(result, Completion):
            return result
        return Completion(text=str(result))


class HttpBackend:
    """OpenAI-style chat endpoint; credentials come from the named env var."""

    def __init__(self, endpoint: str, model: str, api_key_env: str) -> None:
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env

    def complete(self, request: ChatRequest) -> Completion:
        import requests

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload: dict = {
            "model": self.model,
            "messages": [
                {"role": m.speaker, "content": m.content} for m in request.messages
            ],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        }
        if request.tools_offered:
            payload["tools"] = [
                {"type": "function", "function": schema} for schema in request.tools_offered
            ]
        try:
            response = requests.post(
                self.endpoint, json=payload, headers=headers, timeout=120
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code >= 500 or response.status_code == 429:
            raise TransportError(f"endpoint returned {response.status_code}")
        if response.status_code != 200:
            raise GatewayError(
                f"endpoint returned {response.status_code}: {response.text[:500]}"
            )
        message = response.json()["choices"][0]["message"]
        calls = tuple(
            ToolCall(
                name=c["function"]["name"], arguments=c["function"]["arguments"]
            )
            for c in message.get("tool_calls") or []
        )
        return Completion(text=message.get("content") or "", tool_calls=calls)


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class MockEmbedder:
    """Deterministic hash-projection embedder.

    A text's vector is the normalized sum of per-token projections, so texts
    sharing vocabulary land near each other while unrelated texts stay
    near-orthogonal. Fully determined by (seed, dim, text).
    """

    def __init__(self, seed: int = 7, dim: int = 256) -> None:
        if dim < 8:
            raise GatewayError("embedding dim must be >= 8")
        self.seed = seed
        self.dim = dim
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        chunks = []
        needed = self.dim
        counter = 0
        while needed > 0:
            digest = hashlib.sha256(
                f"{self.seed}|{counter}|{token}".encode("utf-8")
            ).digest()
            block = np.frombuffer(digest, dtype="<u4").astype(np.float64)
            chunks.append(block / 2**31 - 1.0)  # map to [-1, 1)
            needed -= block.size
            counter += 1
        vec = np.concatenate(chunks)[: self.dim]
        self._token_cache[token] = vec
        return vec

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            raise GatewayError("embed requires at least one text")
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = _TOKEN_RE.findall(text.lower())
            if not tokens:
                tokens = ["<empty>"]
            acc = np.zeros(self.dim, dtype=np.float64)
            for token in tokens:
                acc += self._token_vector(token)
            norm = float(np.linalg.norm(acc))
            if norm == 0.0:
                acc = self._token_vector("<zero>")
                norm = float(np.linalg.norm(acc))
            out[row] = acc / norm
        return out


class HttpEmbedder:
    """OpenAI-style /embeddings endpoint."""

    def __init__(self, endpoint: str, model: str, api_key_env: str, dim: int) -> None:
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.dim = dim

    def embed(self, texts: list[str]) -> np.ndarray:
        import requests

        if not texts:
            raise GatewayError("embed requires at least one text")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            response = requests.post(
                self.endpoint,
                json={"model": self.model, "input": texts},
                headers=headers,
                timeout=120,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code != 200:
            raise TransportError(f"embedding endpoint returned {response.status_code}")
        rows = [item["embedding"] for item in response.json()["data"]]
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise GatewayError(
                f"embedding dimension mismatch: expected {self.dim}, got {arr.shape}"
            )
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        return arr / np.where(norms == 0.0, 1.0, norms)


class Gateway:
    """Single entry point for completions and embeddings.

    Retries transient transport failures with exponential backoff, caps
    concurrent requests per role slot, and logs every request/response pair
    with its fingerprint. Message content is never mutated.
    """

    def __init__(
        self,
        backends: dict,
        embedder,
        retries: int = 2,
        backoff_s: float = 0.2,
        rate_cap: int = 4,
        sleep=time.sleep,
    ) -> None:
        self._backends = backends
        self._embedder = embedder
        self._retries = retries
        self._backoff_s = backoff_s
        self._sleep = sleep
        self._slots = {
            slot: threading.BoundedSemaphore(rate_cap) for slot in backends
        }
        self._log: list[dict] = []
        self._log_lock = threading.Lock()

    @property
    def embedder(self):
        return self._embedder

    def call_log(self) -> list[dict]:
        with self._log_lock:
            return list(self._log)

    def complete(self, request: ChatRequest) -> Completion:
        request.validate()
        backend = self._backends.get(request.role_slot)
        if backend is None:
            raise GatewayError(f"no backend configured for role {request.role_slot!r}")
        key = request_fingerprint(request)
        attempt = 0
        semaphore = self._slots[request.role_slot]
        while True:
            try:
                with semaphore:
                    completion = backend.complete(request)
                break
            except TransportError:
                if attempt >= self._retries:
                    raise
                self._sleep(self._backoff_s * (2**attempt))
                attempt += 1
        with self._log_lock:
            self._log.append(
                {
                    "fingerprint": key,
                    "role_slot": request.role_slot,
                    "template_id": request.template_id,
                    "request": [
                        {"speaker": m.speaker, "content": m.content}
                        for m in request.messages
                    ],
                    "response": completion.to_dict(),
                    "response_digest": hashlib.sha256(
                        canonical_json(completion.to_dict()).encode("utf-8")
                    ).hexdigest(),
                }
            )
        return completion

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            raise GatewayError("embed requires at least one text")
        vectors = self._embedder.embed(texts)
        norms = np.linalg.norm(vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise GatewayError("embedder returned non-unit vectors")
        return vectors
