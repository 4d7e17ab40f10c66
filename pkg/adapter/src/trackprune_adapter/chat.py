"""Chat backends: canned-reply stub and upstream proxy."""

from __future__ import annotations

import json
import re
from abc import ABC, abstractmethod
from pathlib import Path

import requests


class ChatError(Exception):
    pass


class UpstreamFailure(ChatError):
    """The proxied backend failed (HTTP 502 with a retry-after hint)."""

    def __init__(self, message: str, retry_after: int = 5):
        super().__init__(message)
        self.retry_after = retry_after


DEFAULT_REPLY = '{"note": "stub reply"}'


def _message_text(payload: dict) -> str:
    chunks = []
    for message in payload.get("messages", []):
        content = message.get("content")
        if isinstance(content, str):
            chunks.append(content)
            continue
        for part in content or []:
            if isinstance(part, dict) and part.get("type") == "text":
                chunks.append(part.get("text", ""))
    return "\n".join(chunks)


def completion_body(text: str, model: str = "stub") -> dict:
    return {
        "id": "adapter-stub",
        "object": "chat.completion",
        "model": model,
        "choices": [
            {"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
        ],
    }


class ChatBackend(ABC):
    @abstractmethod
    def complete(self, payload: dict) -> dict:
        """Return a chat-completions response body for the request payload."""


class StubChat(ChatBackend):
    """Pattern-matched canned replies; records the last payload for inspection."""

    def __init__(self, replies: list[tuple[str, str]] | str | Path | None = None):
        if replies is None:
            rules = []
        elif isinstance(replies, (str, Path)):
            data = json.loads(Path(replies).read_text())
            rules = [(entry["pattern"], entry["reply"]) for entry in data["replies"]]
        else:
            rules = list(replies)
        self.rules = [(re.compile(pattern, re.DOTALL), reply) for pattern, reply in rules]
        self.last_payload: dict | None = None

    def complete(self, payload: dict) -> dict:
        self.last_payload = payload
        text = _message_text(payload)
        for pattern, reply in self.rules:
            if pattern.search(text):
                return completion_body(reply, model=payload.get("model", "stub"))
        return completion_body(DEFAULT_REPLY, model=payload.get("model", "stub"))


class ProxyChat(ChatBackend):
    """Forwards the payload untouched to an upstream chat-completions server."""

    def __init__(self, upstream_url: str, timeout: float = 300.0, session: requests.Session | None = None):
        self.upstream_url = upstream_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, payload: dict) -> dict:
        url = f"{self.upstream_url}/chat/completions"
        try:
            resp = self.session.post(url, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise UpstreamFailure(f"upstream {url} unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise UpstreamFailure(f"upstream {url} -> {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise UpstreamFailure(f"upstream {url} returned non-JSON") from exc
