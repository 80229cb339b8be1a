"""Chat-completion backends and structured-output extraction.

Two backends serve all agent roles: an HTTP client speaking the common
chat-completions wire format, and a scripted backend that replays canned
replies so tests and desk runs are fully reproducible without network
access. A scripted backend never improvises: a request with no matching
script entry is a loud error.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx
import jsonschema

MESSAGE_ROLES = ("system", "user", "assistant", "tool")
FINISH_REASONS = ("stop", "length", "error")
RESPONSE_SCHEMAS = ("analysis_report", "pattern_list", "evolved_prompt")

DEFAULT_API_KEY_ENV = "PROMPTLOOP_API_KEY"


class BackendError(RuntimeError):
    """Base class for backend failures."""


class TransportError(BackendError):
    """The HTTP backend exhausted its retries."""


class ScriptExhaustedError(BackendError):
    """No script entry matches the request."""


class ScriptAmbiguityError(BackendError):
    """More than one script entry matches the request."""


class ConcurrentScriptUseError(BackendError):
    """A turn-indexed script was used from more than one thread."""


class MalformedOutputError(BackendError):
    """Agent output carried no parsable structured payload."""

    def __init__(self, message: str, raw_content: str = ""):
        super().__init__(message)
        self.raw_content = raw_content


class SchemaViolationError(MalformedOutputError):
    """A structured payload failed validation against its schema."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in MESSAGE_ROLES:
            raise ValueError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model_name: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    response_schema: str | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("the first message must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.response_schema is not None and self.response_schema not in RESPONSE_SCHEMAS:
            raise ValueError(f"unknown response schema {self.response_schema!r}")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    usage: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"unknown finish reason {self.finish_reason!r}")
        if self.finish_reason == "stop" and not self.content:
            raise ValueError("finish_reason=stop requires non-empty content")


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def hash_messages(messages: Sequence[ChatMessage]) -> str:
    payload = json.dumps(
        [{"role": m.role, "content": m.content} for m in messages],
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ScriptEntry:
    """One canned reply, matched by call order or by exact message hash."""

    reply: str
    turn_index: int | None = None
    message_hash: str | None = None

    def __post_init__(self) -> None:
        if (self.turn_index is None) == (self.message_hash is None):
            raise ValueError("set exactly one of turn_index or message_hash")
        if self.turn_index is not None and self.turn_index < 0:
            raise ValueError("turn_index must be non-negative")


class ScriptedBackend:
    """Deterministic replay backend.

    Matching is evaluated under a lock so concurrent hash-matched use stays
    deterministic. Scripts containing turn-indexed entries depend on call
    order and therefore refuse concurrent use outright.
    """

    def __init__(self, entries: Sequence[ScriptEntry], name: str = "scripted"):
        self.name = name
        self._entries = tuple(entries)
        turns = [e.turn_index for e in self._entries if e.turn_index is not None]
        if len(set(turns)) != len(turns):
            raise ValueError(f"script {name!r} has duplicate turn_index entries")
        hashes = [e.message_hash for e in self._entries if e.message_hash is not None]
        if len(set(hashes)) != len(hashes):
            raise ValueError(f"script {name!r} has duplicate message_hash entries")
        self._has_turn_entries = bool(turns)
        self._calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> "ScriptedBackend":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise ValueError(f"script file {path} must hold a JSON array")
        entries = [
            ScriptEntry(
                reply=item["reply"],
                turn_index=item.get("turn_index"),
                message_hash=item.get("message_hash"),
            )
            for item in raw
        ]
        return cls(entries, name=name or Path(path).stem)

    @property
    def calls_made(self) -> int:
        return self._calls

    def reset(self) -> None:
        with self._lock:
            self._calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        acquired = self._lock.acquire(blocking=not self._has_turn_entries)
        if not acquired:
            raise ConcurrentScriptUseError(
                f"script {self.name!r} uses turn indices and must be "
                "called from a single thread"
            )
        try:
            digest = hash_messages(request.messages)
            matches = [
                e
                for e in self._entries
                if e.turn_index == self._calls or e.message_hash == digest
            ]
            if len(matches) > 1:
                raise ScriptAmbiguityError(
                    f"script {self.name!r}: call {self._calls} matches "
                    f"{len(matches)} entries"
                )
            if not matches:
                raise ScriptExhaustedError(
                    f"script {self.name!r} exhausted: no entry for call "
                    f"{self._calls} (message hash {digest[:12]})"
                )
            self._calls += 1
            reply = matches[0].reply
            prompt_tokens = sum(len(m.content) for m in request.messages) // 4
            return ChatResponse(
                content=reply,
                finish_reason="stop",
                usage=(prompt_tokens, len(reply) // 4),
            )
        finally:
            self._lock.release()


_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class HttpBackend:
    """Client for a chat-completions endpoint.

    POSTs {"model", "messages", "temperature", "max_tokens"} to
    ``{base_url}/chat/completions`` with a bearer token read from an
    environment variable. Transport-level failures are retried with
    exponential backoff; schema problems in agent output are never retried
    here because they indicate a prompt problem, not a network problem.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        max_attempts: int = 3,
        backoff_seconds: Sequence[float] = (1.0, 2.0, 4.0),
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.max_attempts = max_attempts
        self.backoff_seconds = tuple(backoff_seconds)
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model_name,
            "messages": [
                {"role": m.role, "content": m.content} for m in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                response = self._client.post(
                    f"{self.base_url}/chat/completions", json=body, headers=headers
                )
                if response.status_code in _RETRYABLE_STATUS:
                    raise httpx.HTTPStatusError(
                        f"status {response.status_code}",
                        request=response.request,
                        response=response,
                    )
                response.raise_for_status()
                return self._parse_body(response.json())
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                if (
                    isinstance(exc, httpx.HTTPStatusError)
                    and exc.response.status_code not in _RETRYABLE_STATUS
                ):
                    raise TransportError(f"chat completion failed: {exc}") from exc
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    delay_index = min(attempt, len(self.backoff_seconds) - 1)
                    self._sleep(self.backoff_seconds[delay_index])
        raise TransportError(
            f"chat completion failed after {self.max_attempts} attempts: {last_error}"
        )

    @staticmethod
    def _parse_body(payload: dict) -> ChatResponse:
        try:
            choice = payload["choices"][0]
            content = choice["message"]["content"] or ""
            finish = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion body: {exc}") from exc
        if finish not in FINISH_REASONS:
            finish = "error"
        usage = payload.get("usage", {})
        return ChatResponse(
            content=content,
            finish_reason=finish,
            usage=(
                int(usage.get("prompt_tokens", 0)),
                int(usage.get("completion_tokens", 0)),
            ),
        )


# ---------------------------------------------------------------------------
# structured output extraction
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)

_schema_cache: dict[str, dict] = {}


def load_schema(name: str) -> dict:
    if name not in RESPONSE_SCHEMAS:
        raise ValueError(f"unknown response schema {name!r}")
    if name not in _schema_cache:
        text = (
            resources.files("promptloop").joinpath(f"schemas/{name}.json").read_text("utf-8")
        )
        _schema_cache[name] = json.loads(text)
    return _schema_cache[name]


def _extract_json(content: str):
    """First well-formed JSON object or array embedded in content.

    Fenced code blocks are tried first, then any balanced payload starting
    at a '{' or '[' in the raw text."""
    candidates: list[str] = [m.group(1) for m in _FENCE_RE.finditer(content)]
    decoder = json.JSONDecoder()
    for candidate in candidates:
        try:
            value = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(value, (dict, list)):
            return value
    for i, char in enumerate(content):
        if char not in "{[":
            continue
        try:
            value, _ = decoder.raw_decode(content[i:])
        except json.JSONDecodeError:
            continue
        if isinstance(value, (dict, list)):
            return value
    return None


def parse_structured(response: ChatResponse, schema: str):
    """Pull the structured payload out of a chat response and validate it.

    Lenient about surrounding prose and code fences, strict about the
    schema itself. Raises MalformedOutputError (carrying the raw content)
    when nothing parses, SchemaViolationError naming the offending field
    when the payload does not conform.
    """
    schema_doc = load_schema(schema)
    payload = _extract_json(response.content)
    if payload is None:
        raise MalformedOutputError(
            f"no JSON payload found in agent output for schema {schema!r}",
            raw_content=response.content,
        )
    try:
        jsonschema.validate(payload, schema_doc)
    except jsonschema.ValidationError as exc:
        location = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolationError(
            f"schema {schema!r} violation at {location}: {exc.message}",
            raw_content=response.content,
        ) from exc
    return payload
