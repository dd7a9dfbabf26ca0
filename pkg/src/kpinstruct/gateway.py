"""Chat-completion gateway: one entry point in front of any backend.

The gateway owns the concerns every caller would otherwise duplicate: a
content-addressed disk cache, retry with exponential backoff on transient
failures, a requests-per-minute token bucket, and an in-flight cap.  Backends
only know how to turn one ChatRequest into one ChatResponse.

Two backends ship: an HTTP client speaking the common chat-completions wire
format, and a deterministic in-process mock used for tests and dry runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import requests

from .errors import (
    AuthError,
    BackendError,
    ContentFilterRefusal,
    RateLimitExhausted,
)
from .prompts import Message

logger = logging.getLogger(__name__)

REFUSAL_MARKER = "<refused>"

_VALID_FIRST_ROLES = ("system", "user")


@dataclass(frozen=True)
class ChatRequest:
    """One completion request.

    request_tag is a run-scoped identifier for logging and test scripting; it
    is deliberately excluded from the cache digest so re-tagged requests still
    hit the cache.
    """

    model_name: str
    messages: tuple[Message, ...]
    temperature: float
    max_tokens: int
    request_tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request must contain at least one message")
        if self.messages[0].role not in _VALID_FIRST_ROLES:
            raise ValueError(f"first message role must be system or user, got {self.messages[0].role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str  # stop | length | error
    usage: Usage
    backend_id: str


def request_digest(request: ChatRequest) -> str:
    """Content hash of everything that determines the completion.

    Same (model, messages, temperature, max_tokens) always maps to the same
    digest; the tag never participates.
    """
    payload = {
        "model": request.model_name,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class TransientBackendError(Exception):
    """Retryable failure: 429, 5xx or a network timeout."""

    def __init__(self, status: int | None, reason: str = ""):
        super().__init__(reason or f"transient backend failure (status {status})")
        self.status = status


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_backoff: float = 1.0
    jitter: float = 0.1


@dataclass
class GatewayConfig:
    max_in_flight: int = 4
    requests_per_minute: int = 60
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    cache_dir: str | Path | None = None

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be at least 1")
        if self.retry.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")


class TokenBucket:
    """Thread-safe token bucket: capacity of one minute's worth of requests."""

    def __init__(self, per_minute: int, clock: Callable[[], float] = time.monotonic):
        self._capacity = float(per_minute)
        self._rate = per_minute / 60.0
        self._tokens = self._capacity
        self._clock = clock
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self, sleep: Callable[[float], None] = time.sleep) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            sleep(wait)


class ResponseCache:
    """Disk cache: one JSON file per request digest plus a small index."""

    def __init__(self, cache_dir: str | Path):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._index_path = self.dir / "index.json"
        self._lock = threading.Lock()
        self._index = self._load_index()

    def _load_index(self) -> dict:
        if self._index_path.exists():
            return json.loads(self._index_path.read_text(encoding="utf-8"))
        return {"entries": {}}

    def get(self, digest: str) -> ChatResponse | None:
        path = self.dir / f"{digest}.json"
        if not path.exists():
            return None
        doc = json.loads(path.read_text(encoding="utf-8"))
        resp = doc["response"]
        return ChatResponse(
            text=resp["text"],
            finish_reason=resp["finish_reason"],
            usage=Usage(**resp["usage"]),
            backend_id=resp["backend_id"],
        )

    def put(self, digest: str, request: ChatRequest, response: ChatResponse) -> None:
        doc = {
            "digest": digest,
            "model": request.model_name,
            "response": {
                "text": response.text,
                "finish_reason": response.finish_reason,
                "usage": {
                    "prompt_tokens": response.usage.prompt_tokens,
                    "completion_tokens": response.usage.completion_tokens,
                },
                "backend_id": response.backend_id,
            },
        }
        with self._lock:
            (self.dir / f"{digest}.json").write_text(
                json.dumps(doc, indent=2, ensure_ascii=False), encoding="utf-8"
            )
            self._index["entries"][digest] = {"model": request.model_name}
            self._index_path.write_text(
                json.dumps(self._index, indent=2, sort_keys=True), encoding="utf-8"
            )

    def __contains__(self, digest: str) -> bool:
        return (self.dir / f"{digest}.json").exists()


DEFAULT_API_KEY_ENV = "KPINSTRUCT_API_KEY"


class HttpBackend:
    """POSTs chat-completion requests to an OpenAI-compatible endpoint."""

    backend_id = "http"

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._session = session or requests.Session()

    def complete(self, request: ChatRequest) -> ChatResponse:
        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise AuthError(
                f"no API key: set the {self.api_key_env} environment variable"
            )
        body = {
            "model": request.model_name,
            "messages": [
                {"role": m.role, "content": m.content} for m in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        try:
            http_resp = self._session.post(
                self.endpoint,
                json=body,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise TransientBackendError(None, f"request timed out: {exc}") from exc
        except requests.ConnectionError as exc:
            raise TransientBackendError(None, f"connection failed: {exc}") from exc

        if http_resp.status_code in (401, 403):
            raise AuthError(f"backend rejected credentials (HTTP {http_resp.status_code})")
        if http_resp.status_code == 429 or http_resp.status_code >= 500:
            raise TransientBackendError(http_resp.status_code)
        if http_resp.status_code != 200:
            raise BackendError(f"unexpected HTTP status {http_resp.status_code}")

        try:
            doc = http_resp.json()
            choice = doc["choices"][0]
            text = choice["message"]["content"] or ""
            finish_reason = choice.get("finish_reason", "stop")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc

        if finish_reason == "content_filter":
            raise ContentFilterRefusal("backend refused the request (content filter)")

        usage_doc = doc.get("usage", {})
        return ChatResponse(
            text=text,
            finish_reason=finish_reason if finish_reason in ("stop", "length") else "error",
            usage=Usage(
                prompt_tokens=int(usage_doc.get("prompt_tokens", 0)),
                completion_tokens=int(usage_doc.get("completion_tokens", 0)),
            ),
            backend_id=self.backend_id,
        )


# Canned mock output, one valid response shape per request kind.  Kept free of
# decimals, bracketed lists and annotation vocabulary so gates pass.
_CANNED_CONVERSATION = (
    "Question: What are the people in this image doing?\n"
    "Answer: The people in the scene are caught in the middle of an active "
    "moment. Their knees are bent and their arms reach outward for balance, "
    "which suggests steady, deliberate movement rather than standing still. "
    "Each of them leans slightly forward, keeping their weight centered as "
    "they move through the space."
)

_CANNED_DETAIL = (
    "The image shows people engaged in a coordinated outdoor activity. Their "
    "posture is upright but relaxed, with shoulders level and arms bent at "
    "the elbows. One figure leans forward with a hand extended, as if "
    "reaching toward a nearby object, while another stands with feet set "
    "apart for stability. The bend of their knees and the placement of their "
    "feet suggest controlled, balanced motion. Their heads are turned toward "
    "one another, which hints at conversation or shared attention. Overall "
    "the scene conveys steady movement, cooperation, and an easy familiarity "
    "between the participants and their surroundings."
)

_CANNED_COMPLEX = (
    "Question: Why might the people in this image be positioned the way they "
    "are, and what does that suggest about their activity?\n"
    "Answer: The way the people hold themselves points to an activity that "
    "rewards balance and anticipation. Bent knees lower the center of "
    "gravity, which is the natural response to uneven footing or shifting "
    "momentum. Arms held away from the body widen the base of support and "
    "make small corrections easier, so the posture is practical rather than "
    "decorative. The forward lean of the torso shows readiness to move, as "
    "weight kept over the toes allows a quick start in any direction. Taken "
    "together, these cues suggest practiced participants who understand the "
    "demands of their setting and have adopted an efficient stance for it."
)

_CANNED_QUESTIONS = {
    "conversation": "What are the people in this image doing?",
    "complex": (
        "Why might the people in this image be positioned the way they are, "
        "and what should they change to carry out their activity more "
        "effectively?"
    ),
}

_CANNED_JUDGE = (
    "8 8\n"
    "Both responses describe the people and their poses with comparable "
    "helpfulness, relevance, accuracy, and level of detail."
)


class MockBackend:
    """Deterministic in-process backend.

    fixture maps request digests to responses; tag_fixture maps request tags,
    which is easier to script in tests.  A mapped value may be a string (the
    completion text), an int (raise a transient failure with that status), the
    REFUSAL_MARKER, or a list of those consumed one per call with the last
    item repeating.  Unmapped requests fall back to the default mode: "echo"
    returns the last user message, "canned" fabricates a well-formed response
    for the request kind encoded in the tag.
    """

    backend_id = "mock"

    def __init__(self, fixture=None, tag_fixture=None, default: str = "echo"):
        if default not in ("echo", "canned"):
            raise ValueError(f"unknown mock default mode {default!r}")
        self.fixture = dict(fixture or {})
        self.tag_fixture = dict(tag_fixture or {})
        self.default = default
        self.calls = 0
        self._lock = threading.Lock()
        self._cursors: dict[str, int] = {}

    def _next_scripted(self, key: str, value):
        if not isinstance(value, list):
            return value
        if not value:
            raise BackendError(f"empty script for {key!r}")
        with self._lock:
            i = self._cursors.get(key, 0)
            self._cursors[key] = i + 1
        return value[min(i, len(value) - 1)]

    def _respond(self, text: str) -> ChatResponse:
        return ChatResponse(
            text=text,
            finish_reason="stop",
            usage=Usage(prompt_tokens=0, completion_tokens=0),
            backend_id=self.backend_id,
        )

    def _canned(self, request: ChatRequest) -> str:
        parts = request.request_tag.split(":")
        kind = parts[0] if parts else ""
        if kind == "judge":
            return _CANNED_JUDGE
        if kind == "benchq":
            return _CANNED_QUESTIONS.get(parts[-1], _CANNED_QUESTIONS["conversation"])
        if kind == "gen":
            sample_type = parts[-1]
            if sample_type == "conversation":
                return _CANNED_CONVERSATION
            if sample_type == "detail":
                return _CANNED_DETAIL
            if sample_type == "complex":
                return _CANNED_COMPLEX
        return self._echo(request)

    @staticmethod
    def _echo(request: ChatRequest) -> str:
        for message in reversed(request.messages):
            if message.role == "user":
                return message.content
        return request.messages[-1].content

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
        digest = request_digest(request)
        item = None
        if digest in self.fixture:
            item = self._next_scripted(digest, self.fixture[digest])
        elif request.request_tag in self.tag_fixture:
            item = self._next_scripted(request.request_tag, self.tag_fixture[request.request_tag])

        if item is None:
            text = self._echo(request) if self.default == "echo" else self._canned(request)
            return self._respond(text)
        if isinstance(item, int):
            raise TransientBackendError(item)
        if item == REFUSAL_MARKER:
            raise ContentFilterRefusal("mock backend scripted refusal")
        return self._respond(str(item))


class Gateway:
    """Front door for completions: cache, rate limit, retries, in-flight cap."""

    def __init__(
        self,
        backend,
        config: GatewayConfig | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.backend = backend
        self.config = config or GatewayConfig()
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._cache = ResponseCache(self.config.cache_dir) if self.config.cache_dir else None
        self._inflight = threading.BoundedSemaphore(self.config.max_in_flight)
        self._bucket = TokenBucket(self.config.requests_per_minute)
        self._counter_lock = threading.Lock()
        self.network_calls = 0

    def _backoff(self, attempt: int) -> float:
        policy = self.config.retry
        return policy.base_backoff * (2 ** (attempt - 1)) + self._rng.random() * policy.jitter

    def complete(self, request: ChatRequest, use_cache: bool = True) -> ChatResponse:
        """Resolve one request, via the cache when possible.

        Transient failures are retried with exponential backoff up to the
        policy budget; auth failures and refusals surface immediately.
        """
        digest = request_digest(request)
        if self._cache is not None and use_cache:
            hit = self._cache.get(digest)
            if hit is not None:
                return hit

        policy = self.config.retry
        with self._inflight:
            last_error: TransientBackendError | None = None
            response = None
            for attempt in range(1, policy.max_attempts + 1):
                self._bucket.acquire(self._sleep)
                with self._counter_lock:
                    self.network_calls += 1
                try:
                    response = self.backend.complete(request)
                    break
                except TransientBackendError as exc:
                    last_error = exc
                    if attempt == policy.max_attempts:
                        break
                    delay = self._backoff(attempt)
                    logger.warning(
                        "transient backend failure (status %s) on attempt %d/%d; retrying in %.2fs",
                        exc.status,
                        attempt,
                        policy.max_attempts,
                        delay,
                    )
                    self._sleep(delay)

        if response is None:
            assert last_error is not None
            if last_error.status == 429:
                raise RateLimitExhausted(
                    f"rate limited on all {policy.max_attempts} attempts"
                ) from last_error
            raise BackendError(
                f"backend failed after {policy.max_attempts} attempts: {last_error}"
            ) from last_error

        if response.finish_reason == "stop" and not response.text.strip():
            raise BackendError("backend returned an empty completion")

        if self._cache is not None:
            self._cache.put(digest, request, response)
        return response
