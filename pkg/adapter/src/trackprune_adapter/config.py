"""Adapter configuration."""

from __future__ import annotations

from dataclasses import dataclass

MAX_REQUEST_BYTES = 25 * 1024 * 1024  # larger payloads are refused with 413


@dataclass(frozen=True)
class AdapterConfig:
    """Which roles to serve and how.

    segmenter_mode: "stub" answers from a fixture file; "checkpoint" would wrap
    real weights (load hook left to deployments) and reports 503 until loaded.
    chat_mode: "stub" answers from a canned-reply table; "proxy" forwards to
    chat_upstream.
    """

    segmenter_mode: str | None = "stub"   # None disables the role
    segmenter_fixture: str | None = None  # default packaged fixture when None
    segmenter_checkpoint: str | None = None
    chat_mode: str | None = "stub"
    chat_upstream: str | None = None
    chat_replies: str | None = None       # JSON file of pattern -> reply
    device: str = "cpu"
    host: str = "127.0.0.1"
    port: int = 8080
    max_request_bytes: int = MAX_REQUEST_BYTES
    inference_queue_size: int = 8

    def __post_init__(self):
        if self.segmenter_mode is None and self.chat_mode is None:
            raise ValueError("at least one of the segmenter/chat roles must be enabled")
        if self.segmenter_mode not in (None, "stub", "checkpoint"):
            raise ValueError(f"unknown segmenter_mode {self.segmenter_mode!r}")
        if self.chat_mode not in (None, "stub", "proxy"):
            raise ValueError(f"unknown chat_mode {self.chat_mode!r}")
        if self.chat_mode == "proxy" and not self.chat_upstream:
            raise ValueError("proxy chat mode needs chat_upstream")
