"""Uniform access to chat-completion and embedding endpoints.

Three engine kinds sit behind one Backend facade:

  http       an OpenAI-compatible gateway (POST {base_url}/chat/completions
             and {base_url}/embeddings) with retry/backoff
  scripted   a deterministic offline chat stand-in for tests and demos,
             keyed purely on the request digest
  local-hash a deterministic term-frequency hash embedder (test/demo only)

Every successful call is recorded in a content-addressed on-disk cache
(cache/<first2hex>/<digest>.json), so a re-run with a warm cache touches no
engine at all and reproduces transcripts byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from bell.core import ROLES, canonical_dumps, pretty_dumps

log = logging.getLogger(__name__)

RETRY_BASE_DELAY_S = 1.0
RETRY_FACTOR = 2.0
DEFAULT_EMBEDDING_DIM = 512

ENGINE_KINDS = ("http", "scripted", "local-hash")


class BackendError(Exception):
    """Base class for backend failures."""


class AuthError(BackendError):
    """HTTP 401/403; fatal, never retried."""


class BackendUnavailableError(BackendError):
    """Retries exhausted on transient failures."""

    def __init__(self, message: str, last_status: int | None = None):
        super().__init__(message)
        self.last_status = last_status


class ProtocolError(BackendError):
    """The endpoint answered with a body we cannot interpret."""


class DegenerateEmbeddingError(BackendError):
    """An embedding came back as (or hashed to) the zero vector."""


@dataclass(frozen=True)
class BackendProfile:
    """Connection, identity, and limit settings for one endpoint.

    API keys never live in the profile: api_key_env names the environment
    variable to read at call time.
    """

    name: str
    model_id: str
    kind: str = "http"
    base_url: str = ""
    api_key_env: str = ""
    max_concurrency: int = 4
    timeout_s: float = 30.0
    max_retries: int = 3
    temperature: float = 0.0
    embedding_dim: int = DEFAULT_EMBEDDING_DIM

    def __post_init__(self):
        if self.kind not in ENGINE_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "model_id": self.model_id,
            "kind": self.kind,
            "base_url": self.base_url,
            "api_key_env": self.api_key_env,
            "max_concurrency": self.max_concurrency,
            "timeout_s": self.timeout_s,
            "max_retries": self.max_retries,
            "temperature": self.temperature,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BackendProfile":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"invalid role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    want_logprobs: bool = False

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message role must be system or user")

    def rendered(self) -> str:
        """All message contents joined; used by scripted rule matching."""
        return "\n".join(m.content for m in self.messages)

    def to_dict(self) -> dict[str, Any]:
        return {
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "want_logprobs": self.want_logprobs,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChatRequest":
        return cls(
            messages=tuple(ChatMessage(m["role"], m["content"]) for m in d["messages"]),
            temperature=d.get("temperature", 0.0),
            want_logprobs=d.get("want_logprobs", False),
        )


@dataclass(frozen=True)
class ChatResponse:
    content: str
    token_logprobs: tuple[float, ...] | None = None
    usage: tuple[int, int] = (0, 0)  # (prompt_tokens, completion_tokens)

    def __post_init__(self):
        if self.token_logprobs is not None and any(lp > 0 for lp in self.token_logprobs):
            raise ValueError("log probabilities must be <= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "content": self.content,
            "token_logprobs": list(self.token_logprobs) if self.token_logprobs is not None else None,
            "usage": {"prompt_tokens": self.usage[0], "completion_tokens": self.usage[1]},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChatResponse":
        logprobs = d.get("token_logprobs")
        usage = d.get("usage", {})
        return cls(
            content=d["content"],
            token_logprobs=tuple(logprobs) if logprobs is not None else None,
            usage=(usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)),
        )


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) < 2:
            raise ValueError("embedding dimension must be >= 2")

    @property
    def dimension(self) -> int:
        return len(self.values)

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)


def cache_key(model_id: str, request: "ChatRequest | str") -> str:
    """Stable sha256 digest over the canonical serialization of
    (model_id, request). Map ordering cannot affect it."""
    if isinstance(request, str):
        payload: dict[str, Any] = {"kind": "embedding", "model_id": model_id, "text": request}
    else:
        payload = {"kind": "chat", "model_id": model_id, "request": request.to_dict()}
    return hashlib.sha256(canonical_dumps(payload).encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed on-disk store, one file per key.

    Values are deterministic once written, so concurrent writers of the same
    key cannot disagree; writes go through a temp file and an atomic rename.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        path = self._path(key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError):
            log.warning("discarding unreadable cache entry %s", path)
            return None

    def put(self, key: str, entry: Mapping[str, Any]) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp.{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(pretty_dumps(dict(entry)), encoding="utf-8")
        os.replace(tmp, path)


@dataclass(frozen=True)
class ScriptRule:
    """Scripted response rule: first rule whose `contains` substring appears
    in the rendered request wins. `reply` may use the {key8} placeholder
    (first 8 hex chars of the request digest)."""

    contains: str
    reply: str
    logprobs: tuple[float, ...] | None = None


class ScriptedChatEngine:
    """Deterministic offline chat engine.

    The canonical request determines the digest and the digest determines the
    reply, so output is a pure function of the cache key. Tracks in-flight
    calls so tests can assert admission limits.
    """

    def __init__(self, rules: Sequence[ScriptRule] = (), default_reply: str = "ok:{key8}",
                 delay_s: float = 0.0):
        self.rules = list(rules)
        self.default_reply = default_reply
        self.delay_s = delay_s
        self.calls = 0
        self.max_in_flight = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    def complete(self, profile: BackendProfile, request: ChatRequest, key: str) -> ChatResponse:
        with self._lock:
            self.calls += 1
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
        try:
            if self.delay_s:
                time.sleep(self.delay_s)
            rendered = request.rendered()
            reply = self.default_reply
            logprobs: tuple[float, ...] | None = None
            for rule in self.rules:
                if rule.contains in rendered:
                    reply = rule.reply
                    logprobs = rule.logprobs
                    break
            content = reply.replace("{key8}", key[:8])
            if not request.want_logprobs:
                logprobs = None
            prompt_tokens = sum(len(m.content.split()) for m in request.messages)
            return ChatResponse(
                content=content,
                token_logprobs=logprobs,
                usage=(prompt_tokens, len(content.split())),
            )
        finally:
            with self._lock:
                self._in_flight -= 1


def _auth_headers(profile: BackendProfile) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if profile.api_key_env:
        key = os.environ.get(profile.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
    return headers


class HttpChatEngine:
    """OpenAI-compatible chat completions over HTTP.

    Transient failures (HTTP 429, 5xx, timeouts) are retried with exponential
    backoff (base 1s, factor 2, multiplicative jitter) up to
    profile.max_retries. 401/403 abort immediately.
    """

    def __init__(self, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 rng: random.Random | None = None):
        self._client = httpx.Client(transport=transport)
        self._sleep = sleep
        self._rng = rng or random.Random()

    def _post_with_retries(self, profile: BackendProfile, url: str,
                           payload: Mapping[str, Any]) -> dict[str, Any]:
        attempt = 0
        last_status: int | None = None
        while True:
            status: int | None = None
            try:
                response = self._client.post(
                    url, json=payload, headers=_auth_headers(profile),
                    timeout=profile.timeout_s,
                )
                status = response.status_code
            except httpx.TimeoutException:
                pass
            except httpx.HTTPError as exc:
                raise BackendUnavailableError(f"request to {url} failed: {exc}") from exc

            if status is not None:
                if status in (401, 403):
                    raise AuthError(f"{url} returned {status}; check the API key")
                if status == 200:
                    try:
                        return response.json()
                    except (json.JSONDecodeError, ValueError) as exc:
                        raise ProtocolError(f"{url} returned non-JSON body") from exc
                if not (status == 429 or 500 <= status < 600):
                    raise ProtocolError(f"{url} returned unexpected status {status}")
                last_status = status

            attempt += 1
            if attempt > profile.max_retries:
                raise BackendUnavailableError(
                    f"{url} still failing after {profile.max_retries} retries",
                    last_status=last_status,
                )
            delay = RETRY_BASE_DELAY_S * (RETRY_FACTOR ** (attempt - 1))
            delay *= 0.5 + self._rng.random()  # jitter in [0.5, 1.5)
            log.warning("retry %d/%d for %s after status %s (sleeping %.2fs)",
                        attempt, profile.max_retries, url, status, delay)
            self._sleep(delay)

    def complete(self, profile: BackendProfile, request: ChatRequest, key: str) -> ChatResponse:
        url = profile.base_url.rstrip("/") + "/chat/completions"
        payload: dict[str, Any] = {
            "model": profile.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
        }
        if request.want_logprobs:
            payload["logprobs"] = True
        data = self._post_with_retries(profile, url, payload)
        try:
            choice = data["choices"][0]
            content = choice["message"]["content"]
            if content is None:
                content = ""  # refusals are recorded as-is
            logprobs = None
            if choice.get("logprobs") and choice["logprobs"].get("content"):
                logprobs = tuple(
                    float(item["logprob"]) for item in choice["logprobs"]["content"]
                )
            usage = data.get("usage", {})
            return ChatResponse(
                content=str(content),
                token_logprobs=logprobs,
                usage=(usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)),
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed chat completion body from {url}") from exc

    def embed(self, profile: BackendProfile, text: str, key: str) -> tuple[float, ...]:
        url = profile.base_url.rstrip("/") + "/embeddings"
        data = self._post_with_retries(
            profile, url, {"model": profile.model_id, "input": text}
        )
        try:
            values = tuple(float(v) for v in data["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed embeddings body from {url}") from exc
        return values


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class LocalHashEmbedEngine:
    """Deterministic fallback embedder: hashed term-frequency vectors.

    Each lowercase alphanumeric token is hashed to a bucket and its count
    added there, so weight scales with term frequency. Cosine-compatible but
    purely lexical; never meant for reported benchmark numbers.
    """

    def __init__(self):
        self.calls = 0

    def embed(self, profile: BackendProfile, text: str, key: str) -> tuple[float, ...]:
        self.calls += 1
        dim = profile.embedding_dim
        values = [0.0] * dim
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            bucket = int.from_bytes(digest, "big") % dim
            values[bucket] += 1.0
        return tuple(values)


def make_chat_engine(profile: BackendProfile, script: Sequence[ScriptRule] = ()):
    if profile.kind == "scripted":
        return ScriptedChatEngine(script)
    if profile.kind == "http":
        return HttpChatEngine()
    raise ValueError(f"profile kind {profile.kind!r} cannot serve chat")


def make_embed_engine(profile: BackendProfile):
    if profile.kind in ("local-hash", "scripted"):
        return LocalHashEmbedEngine()
    if profile.kind == "http":
        return HttpChatEngine()
    raise ValueError(f"profile kind {profile.kind!r} cannot serve embeddings")


@dataclass
class _ProfileState:
    chat_engine: Any = None
    embed_engine: Any = None
    limiter: threading.BoundedSemaphore = field(
        default_factory=lambda: threading.BoundedSemaphore(1)
    )


class Backend:
    """Cache-fronted, concurrency-limited access to all configured endpoints.

    engine_calls counts actual engine invocations (cache misses); a warm
    cache keeps it at zero for a full pipeline re-run.
    """

    def __init__(self, cache_dir: str | Path | None = None,
                 scripts: Mapping[str, Sequence[ScriptRule]] | None = None):
        self._cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self._scripts = dict(scripts or {})
        self._profiles: dict[str, _ProfileState] = {}
        self._lock = threading.Lock()
        self._engine_calls = 0

    @property
    def engine_calls(self) -> int:
        return self._engine_calls

    def register(self, profile: BackendProfile, chat_engine=None, embed_engine=None) -> None:
        """Pre-register engines for a profile; otherwise they are created
        lazily from the profile's kind."""
        state = self._state(profile)
        if chat_engine is not None:
            state.chat_engine = chat_engine
        if embed_engine is not None:
            state.embed_engine = embed_engine

    def _state(self, profile: BackendProfile) -> _ProfileState:
        with self._lock:
            state = self._profiles.get(profile.name)
            if state is None:
                state = _ProfileState(
                    limiter=threading.BoundedSemaphore(profile.max_concurrency)
                )
                self._profiles[profile.name] = state
            return state

    def _count_call(self) -> None:
        with self._lock:
            self._engine_calls += 1

    def chat(self, profile: BackendProfile, request: ChatRequest) -> ChatResponse:
        key = cache_key(profile.model_id, request)
        if self._cache is not None:
            entry = self._cache.get(key)
            if entry is not None:
                return ChatResponse.from_dict(entry["response"])
        state = self._state(profile)
        if state.chat_engine is None:
            state.chat_engine = make_chat_engine(profile, self._scripts.get(profile.name, ()))
        with state.limiter:
            self._count_call()
            response = state.chat_engine.complete(profile, request, key)
        if self._cache is not None:
            self._cache.put(key, {
                "key": key,
                "kind": "chat",
                "model_id": profile.model_id,
                "request": request.to_dict(),
                "response": response.to_dict(),
            })
        return response

    def embed(self, profile: BackendProfile, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("cannot embed empty text")
        key = cache_key(profile.model_id, text)
        if self._cache is not None:
            entry = self._cache.get(key)
            if entry is not None:
                return EmbeddingVector(tuple(entry["response"]["values"]))
        state = self._state(profile)
        if state.embed_engine is None:
            state.embed_engine = make_embed_engine(profile)
        with state.limiter:
            self._count_call()
            values = state.embed_engine.embed(profile, text, key)
        vector = EmbeddingVector(tuple(values))
        if vector.is_zero():
            raise DegenerateEmbeddingError(
                f"embedding of {text[:40]!r} is the zero vector"
            )
        if self._cache is not None:
            self._cache.put(key, {
                "key": key,
                "kind": "embedding",
                "model_id": profile.model_id,
                "request": {"text": text},
                "response": {"values": list(vector.values)},
            })
        return vector
