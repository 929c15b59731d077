"""Text-generation and embedding clients.

Remote backends speak the OpenAI-compatible ``/chat/completions`` and
``/embeddings`` HTTP shapes. Scripted backends replay fixture files so the
whole pipeline can run deterministically without a model server.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from collections import deque
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .errors import (
    BackendUnavailable,
    ContextTooLong,
    DimensionMismatch,
    MalformedResponse,
    TransientBackendError,
    ZeroVector,
)

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role != "system" and not self.content:
            raise ValueError(f"{self.role} message must have content")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


def check_alternation(messages: Sequence[ChatMessage]) -> None:
    """Optional leading system turn, then strictly alternating user/assistant."""
    rest = list(messages)
    if rest and rest[0].role == "system":
        rest = rest[1:]
    for i, m in enumerate(rest):
        expected = "user" if i % 2 == 0 else "assistant"
        if m.role != expected:
            raise ValueError(f"message {i}: expected {expected}, got {m.role}")


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[ChatMessage, ...]
    max_tokens: int = 512
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = 0

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))


def fingerprint(messages: Iterable[ChatMessage]) -> str:
    """Stable key for a conversation: sha256 over ``role:content`` lines."""
    joined = "\n".join(f"{m.role}:{m.content}" for m in messages)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def estimate_tokens(request: GenerationRequest) -> int:
    # 4 chars/token heuristic plus a small per-message overhead; no tokenizer on purpose
    prompt = sum(math.ceil(len(m.content) / 4) + 4 for m in request.messages)
    return prompt + request.max_tokens


# ---------------------------------------------------------------------------
# throttling

class TokenBucket:
    """Blocking token bucket; ``rate`` tokens per second, ``capacity`` burst."""

    def __init__(self, rate: float, capacity: float | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


class Throttle:
    """In-flight cap plus optional rate limit, shared by every caller of a backend."""

    def __init__(self, max_in_flight: int = 8, rate_per_sec: float | None = None):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.max_in_flight = max_in_flight
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self._bucket = TokenBucket(rate_per_sec) if rate_per_sec else None
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0

    def __enter__(self) -> Throttle:
        self._sem.acquire()
        if self._bucket is not None:
            self._bucket.acquire()
        with self._lock:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        return self

    def __exit__(self, *exc) -> None:
        with self._lock:
            self.in_flight -= 1
        self._sem.release()


@dataclass
class RetryPolicy:
    attempts: int = 3
    base_delay: float = 1.0
    jitter: float = 0.2
    sleep: Callable[[float], None] = time.sleep
    rng: random.Random = field(default_factory=lambda: random.Random(0))

    def delay(self, attempt: int) -> float:
        """Backoff before retry number ``attempt`` (0-based): 1s, 2s, 4s ... +-jitter."""
        base = self.base_delay * (2 ** attempt)
        return base * (1 + self.rng.uniform(-self.jitter, self.jitter))


# ---------------------------------------------------------------------------
# generation backends

class GenerationBackend:
    """Base class: subclasses implement :meth:`complete` for a single attempt."""

    name = "generation"
    context_window: int | None = None
    throttle: Throttle | None = None

    def complete(self, request: GenerationRequest) -> str:
        raise NotImplementedError

    def ping(self) -> None:
        """Raise :class:`BackendUnavailable` if the backend cannot serve requests."""


def generate(backend: GenerationBackend, request: GenerationRequest,
             policy: RetryPolicy | None = None) -> str:
    """Run ``request`` on ``backend`` with retries on transient failures."""
    if backend.context_window is not None and estimate_tokens(request) > backend.context_window:
        raise ContextTooLong(
            f"request needs ~{estimate_tokens(request)} tokens, "
            f"backend {backend.name} allows {backend.context_window}")
    policy = policy or RetryPolicy()
    last: Exception | None = None
    for attempt in range(policy.attempts):
        try:
            if backend.throttle is not None:
                with backend.throttle:
                    text = backend.complete(request)
            else:
                text = backend.complete(request)
        except TransientBackendError as exc:
            last = exc
            logger.warning("backend %s transient failure (attempt %d/%d): %s",
                           backend.name, attempt + 1, policy.attempts, exc)
            if attempt + 1 < policy.attempts:
                policy.sleep(policy.delay(attempt))
            continue
        if not isinstance(text, str):
            raise MalformedResponse(f"backend {backend.name} returned {type(text).__name__}")
        return text
    raise BackendUnavailable(f"backend {backend.name} failed after {policy.attempts} attempts: {last}")


class ScriptedGenerator(GenerationBackend):
    """Replays fixed completions.

    Responses are looked up by :func:`fingerprint` of the message list; if no
    key matches, the next entry of the ordered queue is served.
    """

    name = "scripted"

    def __init__(self, responses: dict[str, str] | None = None,
                 queue: Iterable[str] | None = None,
                 context_window: int | None = None,
                 latency: float = 0.0,
                 throttle: Throttle | None = None):
        self.responses = dict(responses or {})
        self.queue: deque[str] = deque(queue or [])
        self.context_window = context_window
        self.latency = latency
        self.throttle = throttle
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> ScriptedGenerator:
        responses: dict[str, str] = {}
        queue: list[str] = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                if not raw.strip():
                    continue
                rec = json.loads(raw)
                if "queue" in rec:
                    queue.extend(rec["queue"])
                elif "key" in rec and "response" in rec:
                    responses[rec["key"]] = rec["response"]
                else:
                    raise MalformedResponse(f"{path}:{lineno}: expected key/response or queue")
        return cls(responses, queue, **kwargs)

    def complete(self, request: GenerationRequest) -> str:
        if self.latency:
            time.sleep(self.latency)
        key = fingerprint(request.messages)
        with self._lock:
            self.calls += 1
            if key in self.responses:
                return self.responses[key]
            if self.queue:
                return self.queue.popleft()
        raise MalformedResponse(f"no scripted response for key {key[:12]}")


class FunctionGenerator(GenerationBackend):
    """Wraps a plain ``request -> text`` callable; handy for simulated models."""

    def __init__(self, fn: Callable[[GenerationRequest], str], name: str = "function",
                 context_window: int | None = None, throttle: Throttle | None = None):
        self.fn = fn
        self.name = name
        self.context_window = context_window
        self.throttle = throttle

    def complete(self, request: GenerationRequest) -> str:
        return self.fn(request)


class RecordingGenerator(GenerationBackend):
    """Passes requests through to ``inner`` and remembers ``key -> response``."""

    def __init__(self, inner: GenerationBackend):
        self.inner = inner
        self.name = f"recording({inner.name})"
        self.context_window = inner.context_window
        self.records: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> str:
        text = self.inner.complete(request)
        with self._lock:
            self.records[fingerprint(request.messages)] = text
        return text

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.records):
                fh.write(json.dumps({"key": key, "response": self.records[key]},
                                    ensure_ascii=False) + "\n")


def _classify_http_error(exc: Exception) -> Exception:
    if isinstance(exc, httpx.HTTPStatusError):
        code = exc.response.status_code
        if code == 429 or code >= 500:
            return TransientBackendError(f"HTTP {code}")
        if code == 400 and "context" in exc.response.text.lower():
            return ContextTooLong(exc.response.text[:200])
        return BackendUnavailable(f"HTTP {code}: {exc.response.text[:200]}")
    return TransientBackendError(str(exc) or type(exc).__name__)


class OpenAIChatBackend(GenerationBackend):
    """Client for any server exposing ``POST {base_url}/chat/completions``."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 context_window: int | None = None, timeout: float = 60.0,
                 throttle: Throttle | None = None, transport: httpx.BaseTransport | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.name = f"openai:{model}"
        self.context_window = context_window
        self.throttle = throttle
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout,
                                    transport=transport)

    @classmethod
    def from_env(cls, model: str, **kwargs) -> OpenAIChatBackend:
        url = os.environ.get("EVIPATH_GEN_URL")
        if not url:
            raise BackendUnavailable("EVIPATH_GEN_URL is not set")
        return cls(url, model, api_key=os.environ.get("EVIPATH_GEN_KEY"), **kwargs)

    def ping(self) -> None:
        try:
            self._client.get("/models").raise_for_status()
        except (httpx.HTTPError, OSError) as exc:
            raise BackendUnavailable(f"{self.base_url} unreachable: {exc}") from exc

    def complete(self, request: GenerationRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [m.to_dict() for m in request.messages],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        if request.seed is not None:
            payload["seed"] = request.seed
        try:
            resp = self._client.post("/chat/completions", json=payload)
            resp.raise_for_status()
        except (httpx.HTTPError, OSError) as exc:
            raise _classify_http_error(exc) from exc
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected completion payload: {resp.text[:200]}") from exc


# ---------------------------------------------------------------------------
# embeddings

class EmbeddingBackend:
    name = "embedding"
    dim: int = 0
    throttle: Throttle | None = None

    def embed_batch(self, texts: list[str]) -> list[Sequence[float]]:
        raise NotImplementedError

    def ping(self) -> None:
        pass


def embed(backend: EmbeddingBackend, texts: Sequence[str],
          policy: RetryPolicy | None = None) -> list[np.ndarray]:
    """Embed ``texts`` in order; one float64 vector per input."""
    texts = list(texts)
    if not texts:
        return []
    for t in texts:
        if not isinstance(t, str) or not t:
            raise ValueError("embed() needs non-empty strings")
    policy = policy or RetryPolicy()
    last: Exception | None = None
    for attempt in range(policy.attempts):
        try:
            if backend.throttle is not None:
                with backend.throttle:
                    rows = backend.embed_batch(texts)
            else:
                rows = backend.embed_batch(texts)
            break
        except TransientBackendError as exc:
            last = exc
            if attempt + 1 < policy.attempts:
                policy.sleep(policy.delay(attempt))
    else:
        raise BackendUnavailable(f"backend {backend.name} failed after {policy.attempts} attempts: {last}")
    if len(rows) != len(texts):
        raise MalformedResponse(f"expected {len(texts)} embeddings, got {len(rows)}")
    out = []
    for row in rows:
        vec = np.asarray(row, dtype=np.float64)
        if vec.ndim != 1 or vec.shape[0] != backend.dim:
            raise DimensionMismatch(f"expected dim {backend.dim}, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise MalformedResponse("embedding contains non-finite values")
        out.append(vec)
    return out


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity clipped to [-1, 1]."""
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine undefined for an all-zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class ScriptedEmbedder(EmbeddingBackend):
    """Serves vectors from a fixture table; unknown texts go to ``fallback``."""

    name = "scripted-embedding"

    def __init__(self, table: dict[str, Sequence[float]], fallback: EmbeddingBackend | None = None):
        if not table and fallback is None:
            raise ValueError("empty table needs a fallback")
        dims = {len(v) for v in table.values()}
        if len(dims) > 1:
            raise DimensionMismatch(f"fixture vectors have mixed dims {sorted(dims)}")
        self.dim = dims.pop() if dims else fallback.dim
        if fallback is not None and fallback.dim != self.dim:
            raise DimensionMismatch("fallback dim differs from table dim")
        self.table = {k: list(v) for k, v in table.items()}
        self.fallback = fallback

    @classmethod
    def from_file(cls, path: str | Path, fallback: EmbeddingBackend | None = None) -> ScriptedEmbedder:
        table = {}
        with open(path, encoding="utf-8") as fh:
            for raw in fh:
                if raw.strip():
                    rec = json.loads(raw)
                    table[rec["text"]] = rec["vector"]
        return cls(table, fallback)

    def embed_batch(self, texts: list[str]) -> list[Sequence[float]]:
        out = []
        for t in texts:
            if t in self.table:
                out.append(self.table[t])
            elif self.fallback is not None:
                out.append(self.fallback.embed_batch([t])[0])
            else:
                raise MalformedResponse(f"no scripted embedding for {t[:40]!r}")
        return out


class HashingEmbedder(EmbeddingBackend):
    """Deterministic bag-of-words embedder (hashed unigrams + bigrams).

    Not a semantic model; it stands in for a sentence encoder in offline runs.
    """

    def __init__(self, dim: int = 512):
        self.dim = dim
        self.name = f"hashing-{dim}"

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed_batch(self, texts: list[str]) -> list[Sequence[float]]:
        from .metrics import normalize

        out = []
        for text in texts:
            vec = np.zeros(self.dim)
            tokens = normalize(text).split() or [text]
            for tok in tokens:
                vec[self._bucket(tok)] += 1.0
            for a, b in zip(tokens, tokens[1:]):
                vec[self._bucket(f"{a} {b}")] += 0.5
            out.append(vec / np.linalg.norm(vec))
        return out


class OpenAIEmbeddingBackend(EmbeddingBackend):
    """Client for ``POST {base_url}/embeddings``."""

    def __init__(self, base_url: str, model: str, dim: int, api_key: str | None = None,
                 timeout: float = 60.0, throttle: Throttle | None = None,
                 transport: httpx.BaseTransport | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.name = f"openai-emb:{model}"
        self.throttle = throttle
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout,
                                    transport=transport)

    @classmethod
    def from_env(cls, model: str, dim: int, **kwargs) -> OpenAIEmbeddingBackend:
        url = os.environ.get("EVIPATH_EMB_URL")
        if not url:
            raise BackendUnavailable("EVIPATH_EMB_URL is not set")
        return cls(url, model, dim, api_key=os.environ.get("EVIPATH_EMB_KEY"), **kwargs)

    def ping(self) -> None:
        try:
            self._client.get("/models").raise_for_status()
        except (httpx.HTTPError, OSError) as exc:
            raise BackendUnavailable(f"{self.base_url} unreachable: {exc}") from exc

    def embed_batch(self, texts: list[str]) -> list[Sequence[float]]:
        try:
            resp = self._client.post("/embeddings", json={"model": self.model, "input": texts})
            resp.raise_for_status()
        except (httpx.HTTPError, OSError) as exc:
            raise _classify_http_error(exc) from exc
        try:
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
            return [d["embedding"] for d in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"unexpected embedding payload: {resp.text[:200]}") from exc
