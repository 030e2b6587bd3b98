"""Chat-completion backends: live HTTP, scripted mock, and record/replay.

Every backend exposes ``complete(messages, temperature) -> Completion`` and
captures token usage. Mock and replay backends never touch the network and
carry ``deterministic = True`` so callers can produce byte-stable artifacts.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .errors import CassetteMissError, GatewayError, ProviderError

CHARS_PER_TOKEN = 4


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise ValueError(f"{self.role} message must not be empty")


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be >= 0")


@dataclass(frozen=True)
class Completion:
    text: str
    usage: TokenUsage
    model_id: str
    estimated: bool = False  # usage estimated locally, not provider-reported


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate: ceil(len / 4 chars-per-token)."""
    return math.ceil(len(text) / CHARS_PER_TOKEN)


def prompt_digest(messages: Sequence[ChatMessage], temperature: float, model_id: str) -> str:
    """SHA-256 over the ordered messages, temperature and model id."""
    payload = json.dumps(
        {
            "messages": [[m.role, m.content] for m in messages],
            "temperature": temperature,
            "model_id": model_id,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _estimated_usage(messages: Sequence[ChatMessage], text: str) -> TokenUsage:
    prompt_chars = sum(len(m.content) for m in messages)
    return TokenUsage(
        input_tokens=math.ceil(prompt_chars / CHARS_PER_TOKEN),
        output_tokens=estimate_tokens(text),
    )


class MockBackend:
    """Scripted backend for tests.

    Three scripting modes, checked in order: a digest-keyed ``responses``
    map, a ``rule`` callable ``(messages, temperature) -> text``, then a
    FIFO ``queue`` of texts.
    """

    deterministic = True

    def __init__(
        self,
        queue: Sequence[str] | None = None,
        responses: dict[str, str] | None = None,
        rule: Callable[[Sequence[ChatMessage], float], str] | None = None,
        model_id: str = "mock",
    ):
        self.queue = list(queue or [])
        self.responses = dict(responses or {})
        self.rule = rule
        self.model_id = model_id
        self.calls: list[str] = []  # digests, in call order
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], temperature: float = 0.0) -> Completion:
        if not messages:
            raise ValueError("messages must be non-empty")
        digest = prompt_digest(messages, temperature, self.model_id)
        with self._lock:
            self.calls.append(digest)
            if digest in self.responses:
                text = self.responses[digest]
            elif self.rule is not None:
                text = self.rule(messages, temperature)
            elif self.queue:
                text = self.queue.pop(0)
            else:
                raise GatewayError("mock backend has no scripted response left")
        return Completion(
            text=text,
            usage=_estimated_usage(messages, text),
            model_id=self.model_id,
            estimated=True,
        )


@dataclass
class CassetteEntry:
    digest: str
    messages: list[list[str]]
    temperature: float
    model_id: str
    response_text: str
    input_tokens: int
    output_tokens: int
    estimated: bool = False


def load_cassette(path: str | Path) -> dict[str, CassetteEntry]:
    entries: dict[str, CassetteEntry] = {}
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            entries[raw["digest"]] = CassetteEntry(**raw)
    return entries


class ReplayBackend:
    """Serve completions from a recorded cassette; miss is an error."""

    deterministic = True

    def __init__(self, cassette_path: str | Path, model_id: str | None = None):
        self.entries = load_cassette(cassette_path)
        if model_id is None:
            model_id = next(iter(self.entries.values())).model_id if self.entries else "replay"
        self.model_id = model_id

    def complete(self, messages: Sequence[ChatMessage], temperature: float = 0.0) -> Completion:
        digest = prompt_digest(messages, temperature, self.model_id)
        entry = self.entries.get(digest)
        if entry is None:
            raise CassetteMissError(digest)
        return Completion(
            text=entry.response_text,
            usage=TokenUsage(entry.input_tokens, entry.output_tokens),
            model_id=entry.model_id,
            estimated=entry.estimated,
        )


class RecordingBackend:
    """Wrap another backend and append every exchange to a cassette file."""

    def __init__(self, inner, cassette_path: str | Path):
        self.inner = inner
        self.model_id = inner.model_id
        self.deterministic = getattr(inner, "deterministic", False)
        self.cassette_path = Path(cassette_path)
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], temperature: float = 0.0) -> Completion:
        completion = self.inner.complete(messages, temperature)
        entry = {
            "digest": prompt_digest(messages, temperature, self.model_id),
            "messages": [[m.role, m.content] for m in messages],
            "temperature": temperature,
            "model_id": completion.model_id,
            "response_text": completion.text,
            "input_tokens": completion.usage.input_tokens,
            "output_tokens": completion.usage.output_tokens,
            "estimated": completion.estimated,
        }
        with self._lock:
            with self.cassette_path.open("a", encoding="utf-8", newline="\n") as handle:
                handle.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")
        return completion


class HttpBackend:
    """OpenAI-compatible chat-completions client with retry and backoff."""

    deterministic = False

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_base: float = 1.0,
        session=None,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def complete(self, messages: Sequence[ChatMessage], temperature: float = 0.0) -> Completion:
        payload = {
            "model": self.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": temperature,
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self.session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except Exception as exc:  # connection error / timeout: retryable
                last_error = exc
                self._sleep(attempt, None)
                continue
            if response.status_code == 429:
                retry_after = response.headers.get("Retry-After")
                last_error = GatewayError("rate limited (HTTP 429)")
                self._sleep(attempt, retry_after)
                continue
            if response.status_code >= 500:
                last_error = GatewayError(f"server error (HTTP {response.status_code})")
                self._sleep(attempt, None)
                continue
            body = response.json()
            if response.status_code >= 400 or "error" in body:
                message = body.get("error", {}).get("message", response.text)
                raise ProviderError(f"provider error: {message}")
            return self._parse(messages, body)
        raise GatewayError(f"request failed after {self.max_retries + 1} attempts: {last_error}")

    def _parse(self, messages: Sequence[ChatMessage], body: dict) -> Completion:
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {body!r}") from exc
        usage = body.get("usage") or {}
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            return Completion(
                text=text,
                usage=TokenUsage(usage["prompt_tokens"], usage["completion_tokens"]),
                model_id=body.get("model", self.model_id),
            )
        return Completion(
            text=text,
            usage=_estimated_usage(messages, text),
            model_id=body.get("model", self.model_id),
            estimated=True,
        )

    def _sleep(self, attempt: int, retry_after: str | None):
        if retry_after is not None:
            try:
                time.sleep(float(retry_after))
                return
            except ValueError:
                pass
        time.sleep(self.backoff_base * (2**attempt))


@dataclass
class BackendConfig:
    """Declarative backend selection, mirrored by CLI flags and config."""

    kind: str = "mock"  # http | mock | replay
    model_id: str = "mock"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 3
    cassette: str | None = None
    record: str | None = None  # wrap with a recorder writing here
    api_key_env: str = "OPENAI_API_KEY"
    mock_queue: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")

    def digest(self) -> str:
        payload = json.dumps(
            {"kind": self.kind, "model_id": self.model_id, "temperature": self.temperature},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def build_backend(config: BackendConfig):
    if config.kind == "mock":
        backend = MockBackend(queue=config.mock_queue, model_id=config.model_id)
    elif config.kind == "replay":
        if not config.cassette:
            raise ValueError("replay backend requires a cassette path")
        backend = ReplayBackend(config.cassette, model_id=config.model_id)
    elif config.kind == "http":
        backend = HttpBackend(
            endpoint=config.endpoint,
            model_id=config.model_id,
            api_key_env=config.api_key_env,
            timeout=config.timeout,
            max_retries=config.max_retries,
        )
    else:
        raise ValueError(f"unknown backend kind {config.kind!r}")
    if config.record:
        backend = RecordingBackend(backend, config.record)
    return backend
