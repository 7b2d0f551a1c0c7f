"""Model-generation backends.

Two backends share the :class:`Backend` protocol: :class:`ChatCompletionsBackend`
speaks the OpenAI-compatible ``/v1/chat/completions`` wire protocol, and
:class:`ScriptedBackend` replays a JSONL fixture for offline runs.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

__all__ = [
    "Message",
    "GenerationRequest",
    "TokenUsage",
    "FinishReason",
    "Completion",
    "Backend",
    "BackendError",
    "TransportError",
    "RateLimitedError",
    "RequestRejectedError",
    "UnmatchedError",
    "MalformedResponseError",
    "FixtureEntry",
    "FixturePolicy",
    "Fixture",
    "ScriptedBackend",
    "ChatCompletionsBackend",
    "fingerprint",
    "estimate_tokens",
    "generate_batch",
]

ROLES = ("system", "user", "assistant")


class BackendError(RuntimeError):
    """Base class for generation failures."""


class TransportError(BackendError):
    pass


class RateLimitedError(BackendError):
    pass


class RequestRejectedError(BackendError):
    """A non-retryable 4xx response."""


class UnmatchedError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.6
    top_p: float = 1.0
    max_tokens: int = 32768
    seed: int | None = None
    model_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def body(self) -> dict:
        body = {
            "model": self.model_id,
            "messages": [m.to_dict() for m in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        return body


def fingerprint(request: GenerationRequest) -> str:
    payload = json.dumps(
        [
            request.model_id,
            [m.to_dict() for m in request.messages],
            request.temperature,
            request.top_p,
            request.max_tokens,
            request.seed,
        ],
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def estimate_tokens(text: str) -> int:
    """Whitespace-delimited token count, used when no usage is reported."""
    return len(text.split())


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def to_dict(self) -> dict:
        return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens}


class FinishReason(str, enum.Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"

    @classmethod
    def parse(cls, value: str | None) -> FinishReason:
        if value in (None, "stop", "eos", "end_turn", "tool_calls"):
            return cls.STOP
        try:
            return cls(value)
        except ValueError:
            return cls.STOP


@dataclass(frozen=True)
class Completion:
    text: str
    token_usage: TokenUsage = field(default_factory=TokenUsage)
    finish_reason: FinishReason = FinishReason.STOP


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> Completion: ...


# ---------------------------------------------------------------------------
# scripted replay


class FixturePolicy(str, enum.Enum):
    SEQUENTIAL = "sequential"
    BY_FINGERPRINT = "by_fingerprint"


@dataclass(frozen=True)
class FixtureEntry:
    fingerprint: str | None
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    finish_reason: FinishReason = FinishReason.STOP

    @classmethod
    def from_dict(cls, d: dict) -> FixtureEntry:
        resp = d["response"]
        if not isinstance(resp.get("text"), str):
            raise ValueError("fixture response needs a text field")
        return cls(
            fingerprint=d.get("fingerprint"),
            text=resp["text"],
            prompt_tokens=resp.get("prompt_tokens"),
            completion_tokens=resp.get("completion_tokens"),
            finish_reason=FinishReason.parse(resp.get("finish_reason")),
        )

    def to_dict(self) -> dict:
        resp: dict = {"text": self.text, "finish_reason": self.finish_reason.value}
        if self.prompt_tokens is not None:
            resp["prompt_tokens"] = self.prompt_tokens
        if self.completion_tokens is not None:
            resp["completion_tokens"] = self.completion_tokens
        return {"fingerprint": self.fingerprint, "response": resp}


@dataclass
class Fixture:
    entries: list[FixtureEntry]
    policy: FixturePolicy = FixturePolicy.SEQUENTIAL

    def __post_init__(self):
        if self.policy is FixturePolicy.BY_FINGERPRINT:
            prints = [e.fingerprint for e in self.entries]
            if None in prints:
                raise ValueError("by-fingerprint fixtures need a fingerprint on every entry")
            if len(set(prints)) != len(prints):
                raise ValueError("duplicate fingerprints in fixture")

    @classmethod
    def load(cls, path: str | Path, policy: FixturePolicy | None = None) -> Fixture:
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entries.append(FixtureEntry.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad fixture entry: {exc}") from exc
        if policy is None:
            keyed = any(e.fingerprint is not None for e in entries)
            policy = FixturePolicy.BY_FINGERPRINT if keyed else FixturePolicy.SEQUENTIAL
        return cls(entries, policy)

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


class ScriptedBackend:
    """Replays fixture completions.

    Sequential fixtures hand out entries in order and fail with
    :class:`UnmatchedError` once exhausted. Fingerprint fixtures answer any
    number of identical requests with the same entry. Every request seen is
    kept in ``requests``.
    """

    def __init__(self, fixture: Fixture | Iterable[str | FixtureEntry]):
        if not isinstance(fixture, Fixture):
            entries = [e if isinstance(e, FixtureEntry) else FixtureEntry(None, e) for e in fixture]
            fixture = Fixture(entries)
        self.fixture = fixture
        self.requests: list[GenerationRequest] = []
        self._cursor = 0
        self._lock = threading.Lock()
        self._by_print = {e.fingerprint: e for e in fixture.entries}

    @property
    def sequential(self) -> bool:
        return self.fixture.policy is FixturePolicy.SEQUENTIAL

    @property
    def remaining(self) -> int:
        return len(self.fixture.entries) - self._cursor if self.sequential else len(self._by_print)

    def generate(self, request: GenerationRequest) -> Completion:
        with self._lock:
            self.requests.append(request)
            if self.sequential:
                if self._cursor >= len(self.fixture.entries):
                    raise UnmatchedError(f"fixture exhausted after {self._cursor} responses")
                entry = self.fixture.entries[self._cursor]
                self._cursor += 1
            else:
                key = fingerprint(request)
                entry = self._by_print.get(key)
                if entry is None:
                    raise UnmatchedError(f"no fixture entry for fingerprint {key[:12]}")
        prompt = entry.prompt_tokens
        if prompt is None:
            prompt = sum(estimate_tokens(m.content) for m in request.messages)
        completion = entry.completion_tokens
        if completion is None:
            completion = estimate_tokens(entry.text)
        return Completion(entry.text, TokenUsage(prompt, completion), entry.finish_reason)


# ---------------------------------------------------------------------------
# live client


class ChatCompletionsBackend:
    """Client for an OpenAI-compatible chat-completions server.

    429 and 5xx responses and network errors are retried with exponential
    backoff (``backoff`` seconds, doubling, with up to 100% jitter); other
    4xx responses fail immediately.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        *,
        timeout: float = 600.0,
        max_retries: int = 4,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        base_url = base_url or os.environ.get("DC_BASE_URL")
        if not base_url:
            raise ValueError("no base URL configured (set DC_BASE_URL)")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("DC_API_KEY")
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._rng = rng or random.Random()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.attempts = 0

    @property
    def url(self) -> str:
        return f"{self.base_url}/v1/chat/completions"

    def close(self) -> None:
        self._client.close()

    def _delay(self, attempt: int) -> float:
        base = self.backoff * (2**attempt)
        return base + self._rng.uniform(0, base)

    def generate(self, request: GenerationRequest) -> Completion:
        last_error: BackendError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self._delay(attempt - 1))
            self.attempts += 1
            try:
                resp = self._client.post(self.url, json=request.body())
            except httpx.HTTPError as exc:
                last_error = TransportError(f"{type(exc).__name__}: {exc}")
                continue
            if resp.status_code == 429:
                last_error = RateLimitedError(f"429 from {self.url}")
                continue
            if resp.status_code >= 500:
                last_error = TransportError(f"{resp.status_code} from {self.url}")
                continue
            if resp.status_code >= 400:
                raise RequestRejectedError(f"{resp.status_code}: {resp.text[:500]}")
            return self._parse(resp, request)
        assert last_error is not None
        raise last_error

    def _parse(self, resp: httpx.Response, request: GenerationRequest) -> Completion:
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected response body: {exc!r}") from exc
        if text is None:
            text = ""
        if not isinstance(text, str):
            raise MalformedResponseError("message content is not a string")
        usage = payload.get("usage")
        if usage:
            try:
                token_usage = TokenUsage(int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponseError(f"bad usage block: {exc!r}") from exc
        else:
            logger.warning("server returned no usage block; estimating tokens")
            token_usage = TokenUsage(
                sum(estimate_tokens(m.content) for m in request.messages), estimate_tokens(text)
            )
        return Completion(text, token_usage, FinishReason.parse(choice.get("finish_reason")))


# ---------------------------------------------------------------------------


def effective_parallelism(backend: Backend, max_in_flight: int) -> int:
    """Clamp concurrency to 1 for sequential replay, whose order must be deterministic."""
    if isinstance(backend, ScriptedBackend) and backend.sequential:
        return 1
    return max_in_flight


def generate_batch(
    backend: Backend,
    requests: Sequence[GenerationRequest],
    max_in_flight: int = 1,
) -> list[Completion | BackendError]:
    """Run requests with at most ``max_in_flight`` outstanding.

    Results line up with ``requests``; a failed item holds its
    :class:`BackendError` instead of a completion.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")

    def call(req: GenerationRequest) -> Completion | BackendError:
        try:
            return backend.generate(req)
        except BackendError as exc:
            return exc

    if max_in_flight == 1:
        return [call(r) for r in requests]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(call, requests))
