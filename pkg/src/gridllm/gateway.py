"""Provider-independent chat interface with scripted, replay, and live backends.

The wire format follows the common chat-completions JSON convention (messages
array with role/content, image parts as typed content objects), so any hosted
or local gateway that speaks it can be used.  Credentials come only from the
environment and are never written into transcripts.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import httpx

from .errors import (InvalidInput, ProtocolError, ReplayMiss, StorageError,
                     TransportError)

ROLES = ("system", "user", "assistant")

ENV_API_BASE = "LLM_API_BASE"
ENV_API_KEY = "LLM_API_KEY"
ENV_MODEL = "LLM_MODEL"

RETRY_BACKOFF_SECONDS = (0.5, 2.0, 8.0)


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    """An image by URL or inline base64 payload, with a declared media type."""

    media_type: str
    data: Optional[str] = None  # base64 payload
    url: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.media_type:
            raise InvalidInput("image parts must declare a media type")
        if (self.data is None) == (self.url is None):
            raise InvalidInput("image parts carry exactly one of data or url")


ContentPart = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[ContentPart, ...]

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise InvalidInput(f"role must be one of {ROLES}, got {self.role!r}")
        parts = tuple(self.parts)
        if not parts:
            raise InvalidInput("a message needs at least one content part")
        object.__setattr__(self, "parts", parts)

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role=role, parts=(TextPart(text),))

    @property
    def text_content(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: Optional[int] = None
    model: Optional[str] = None

    def __post_init__(self) -> None:
        messages = tuple(self.messages)
        if not messages:
            raise InvalidInput("a chat request needs at least one message")
        object.__setattr__(self, "messages", messages)


@dataclass(frozen=True)
class ChatResponse:
    message: ChatMessage
    finish_reason: str = "stop"
    usage: TokenUsage = TokenUsage()


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

def part_to_wire(part: ContentPart) -> dict:
    if isinstance(part, TextPart):
        return {"type": "text", "text": part.text}
    url = part.url if part.url is not None else (
        f"data:{part.media_type};base64,{part.data}"
    )
    return {"type": "image_url",
            "image_url": {"url": url, "media_type": part.media_type}}


def part_from_wire(obj: dict) -> ContentPart:
    kind = obj.get("type")
    if kind == "text":
        return TextPart(obj["text"])
    if kind == "image_url":
        info = obj["image_url"]
        url = info["url"]
        media_type = info.get("media_type", "")
        if url.startswith("data:"):
            header, _, payload = url.partition(",")
            media_type = media_type or header[5:].split(";")[0]
            return ImagePart(media_type=media_type, data=payload)
        return ImagePart(media_type=media_type or "image/*", url=url)
    raise ProtocolError(f"unknown content part type {kind!r}")


def message_to_wire(message: ChatMessage) -> dict:
    if len(message.parts) == 1 and isinstance(message.parts[0], TextPart):
        content: object = message.parts[0].text
    else:
        content = [part_to_wire(p) for p in message.parts]
    return {"role": message.role, "content": content}


def message_from_wire(obj: dict) -> ChatMessage:
    try:
        role = obj["role"]
        content = obj["content"]
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed message object: {obj!r}") from exc
    if isinstance(content, str):
        return ChatMessage.text(role, content)
    return ChatMessage(role=role, parts=tuple(part_from_wire(p) for p in content))


def request_to_wire(request: ChatRequest, default_model: str = "") -> dict:
    payload: dict = {
        "model": request.model or default_model,
        "messages": [message_to_wire(m) for m in request.messages],
        "temperature": request.temperature,
    }
    if request.max_tokens is not None:
        payload["max_tokens"] = request.max_tokens
    return payload


def request_from_wire(payload: dict) -> ChatRequest:
    try:
        return ChatRequest(
            messages=tuple(message_from_wire(m) for m in payload["messages"]),
            temperature=payload.get("temperature", 0.0),
            max_tokens=payload.get("max_tokens"),
            model=payload.get("model") or None,
        )
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed request payload: {exc}") from exc


def response_to_wire(response: ChatResponse) -> dict:
    return {
        "choices": [{
            "message": message_to_wire(response.message),
            "finish_reason": response.finish_reason,
        }],
        "usage": {
            "prompt_tokens": response.usage.prompt_tokens,
            "completion_tokens": response.usage.completion_tokens,
            "total_tokens": response.usage.total_tokens,
        },
    }


def response_from_wire(payload: dict) -> ChatResponse:
    try:
        choice = payload["choices"][0]
        message = message_from_wire(choice["message"])
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed response payload: {exc}") from exc
    usage_obj = payload.get("usage") or {}
    usage = TokenUsage(
        prompt_tokens=int(usage_obj.get("prompt_tokens", 0)),
        completion_tokens=int(usage_obj.get("completion_tokens", 0)),
    )
    return ChatResponse(message=message,
                        finish_reason=choice.get("finish_reason", "stop"),
                        usage=usage)


def message_digest(messages: Sequence[ChatMessage]) -> str:
    """Stable content digest of a message list; replay keys on this."""
    canonical = json.dumps([message_to_wire(m) for m in messages],
                           sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class ChatProvider:
    """Interface: anything with chat(request) -> ChatResponse."""

    def chat(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


Rule = Callable[[ChatRequest], Optional[str]]


class ScriptedProvider(ChatProvider):
    """Deterministic offline provider driven by a rule table.

    Rules are callables taking the request and returning the assistant text or
    None to pass; the first non-None answer wins.
    """

    def __init__(self, rules: Sequence[Rule] = (), default: Optional[str] = None):
        self.rules = list(rules)
        self.default = default
        self.calls = 0

    @classmethod
    def always(cls, text: str) -> "ScriptedProvider":
        return cls(default=text)

    @classmethod
    def sequence(cls, texts: Iterable[str], repeat_last: bool = False
                 ) -> "ScriptedProvider":
        queue = list(texts)
        state = {"i": 0}

        def rule(_: ChatRequest) -> Optional[str]:
            i = state["i"]
            if i >= len(queue):
                if repeat_last and queue:
                    return queue[-1]
                raise TransportError("scripted sequence exhausted")
            state["i"] = i + 1
            return queue[i]

        return cls(rules=[rule])

    def chat(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        for rule in self.rules:
            text = rule(request)
            if text is not None:
                return ChatResponse(message=ChatMessage.text("assistant", text))
        if self.default is not None:
            return ChatResponse(message=ChatMessage.text("assistant", self.default))
        raise TransportError("no scripted rule matched the request")


class ReplayProvider(ChatProvider):
    """Replays recorded responses from a transcript; performs no network I/O."""

    def __init__(self, transcript: "Transcript"):
        self.transcript = transcript

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ReplayProvider":
        return cls(Transcript.load(path))

    def chat(self, request: ChatRequest) -> ChatResponse:
        digest = message_digest(request.messages)
        payload = self.transcript.lookup(digest)
        if payload is None:
            raise ReplayMiss(digest)
        return response_from_wire(payload)


class LiveChatProvider(ChatProvider):
    """HTTP chat-completions client with bounded retries on transient failures."""

    def __init__(self, base_url: str, api_key: str, model: str,
                 timeout: float = 60.0,
                 sleep: Callable[[float], None] = time.sleep):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self._sleep = sleep

    @classmethod
    def from_env(cls, env: Optional[dict] = None) -> "LiveChatProvider":
        env = os.environ if env is None else env
        missing = [name for name in (ENV_API_BASE, ENV_API_KEY)
                   if not env.get(name)]
        if missing:
            raise InvalidInput(
                f"live provider needs {' and '.join(missing)} in the environment"
            )
        return cls(base_url=env[ENV_API_BASE], api_key=env[ENV_API_KEY],
                   model=env.get(ENV_MODEL, "gpt-4"))

    def chat(self, request: ChatRequest) -> ChatResponse:
        payload = request_to_wire(request, default_model=self.model)
        url = f"{self.base_url}/chat/completions"
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(len(RETRY_BACKOFF_SECONDS) + 1):
            if attempt > 0:
                self._sleep(RETRY_BACKOFF_SECONDS[attempt - 1])
            try:
                resp = httpx.post(url, json=payload, headers=headers,
                                  timeout=self.timeout)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = TransportError(
                    f"provider returned status {resp.status_code}"
                )
                continue
            if resp.status_code != 200:
                raise TransportError(
                    f"provider returned status {resp.status_code}: {resp.text[:200]}"
                )
            try:
                body = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"provider returned non-JSON body: {exc}") from exc
            return response_from_wire(body)
        raise TransportError(f"exhausted retries: {last_error}") from last_error


# ---------------------------------------------------------------------------
# Transcripts and recording
# ---------------------------------------------------------------------------

@dataclass
class Transcript:
    """Ordered request/response pairs keyed by the request-message digest."""

    entries: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._index = {e["digest"]: e["response"] for e in self.entries}

    def lookup(self, digest: str) -> Optional[dict]:
        return self._index.get(digest)

    def append(self, digest: str, request: dict, response: dict) -> dict:
        entry = {"digest": digest, "request": request, "response": response}
        self.entries.append(entry)
        self._index[digest] = response
        return entry

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Transcript":
        entries = []
        text = Path(path).read_text(encoding="utf-8")
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise StorageError(
                    f"{path}:{line_no}: corrupt transcript line: {exc}"
                ) from exc
        return cls(entries=entries)


class RecordingProvider(ChatProvider):
    """Wraps a provider, appending every exchange to a JSONL transcript file."""

    def __init__(self, inner: ChatProvider, path: Union[str, Path]):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()

    def chat(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.chat(request)
        entry = {
            "digest": message_digest(request.messages),
            "request": request_to_wire(request),
            "response": response_to_wire(response),
        }
        line = json.dumps(entry, sort_keys=True)
        with self._lock:
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            except OSError as exc:
                raise StorageError(f"cannot append transcript {self.path}: {exc}"
                                   ) from exc
        return response


def record(provider: ChatProvider, request: ChatRequest,
           path: Union[str, Path]) -> ChatResponse:
    """One-shot convenience: chat through `provider` and log the pair to `path`."""
    return RecordingProvider(provider, path).chat(request)
