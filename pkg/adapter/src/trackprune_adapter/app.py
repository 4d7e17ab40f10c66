"""The HTTP surface: /v1/segment, /chat/completions, /healthz."""

from __future__ import annotations

import json
import threading

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from trackprune_adapter.chat import ChatBackend, ProxyChat, StubChat, UpstreamFailure
from trackprune_adapter.config import AdapterConfig
from trackprune_adapter.segmenter import (
    CheckpointSegmenter,
    FramesUndecodable,
    ModelNotLoaded,
    SegmenterBackend,
    StubSegmenter,
    decode_frames,
)


def _error(status: int, message: str, headers: dict | None = None) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message}, headers=headers or {})


def _validate_segment_request(body) -> str | None:
    if not isinstance(body, dict):
        return "request body must be a JSON object"
    for key, kind in (("video_id", str), ("frames", list), ("width", int), ("height", int), ("concept", str)):
        if key not in body:
            return f"missing field {key!r}"
        if not isinstance(body[key], kind) or isinstance(body[key], bool):
            return f"field {key!r} has the wrong type"
    if not body["concept"].strip():
        return "concept must be non-empty"
    if not body["frames"] or not all(isinstance(f, str) for f in body["frames"]):
        return "frames must be a non-empty list of strings"
    if body.get("frame_encoding", "path") not in ("path", "b64"):
        return "frame_encoding must be 'path' or 'b64'"
    if body["width"] < 1 or body["height"] < 1:
        return "width and height must be positive"
    return None


def _validate_chat_request(body) -> str | None:
    if not isinstance(body, dict):
        return "request body must be a JSON object"
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        return "messages must be a non-empty list"
    for message in messages:
        if not isinstance(message, dict) or "role" not in message or "content" not in message:
            return "each message needs role and content"
    return None


class InferenceGate:
    """Serializes model inference per device behind a bounded admission queue."""

    def __init__(self, queue_size: int):
        self._admission = threading.BoundedSemaphore(max(1, queue_size))
        self._device_lock = threading.Lock()

    def __enter__(self):
        if not self._admission.acquire(blocking=False):
            raise QueueFull()
        self._device_lock.acquire()
        return self

    def __exit__(self, *exc_info):
        self._device_lock.release()
        self._admission.release()
        return False


class QueueFull(Exception):
    pass


def build_segmenter(config: AdapterConfig) -> SegmenterBackend | None:
    if config.segmenter_mode is None:
        return None
    if config.segmenter_mode == "stub":
        return StubSegmenter(config.segmenter_fixture)
    return CheckpointSegmenter(config.segmenter_checkpoint, config.device)


def build_chat(config: AdapterConfig) -> ChatBackend | None:
    if config.chat_mode is None:
        return None
    if config.chat_mode == "stub":
        return StubChat(config.chat_replies)
    return ProxyChat(config.chat_upstream)


def create_app(
    config: AdapterConfig | None = None,
    segmenter: SegmenterBackend | None = None,
    chat: ChatBackend | None = None,
) -> FastAPI:
    config = config or AdapterConfig()
    segmenter = segmenter if segmenter is not None else build_segmenter(config)
    chat = chat if chat is not None else build_chat(config)
    gate = InferenceGate(config.inference_queue_size)

    app = FastAPI(title="trackprune-adapter", version="0.1.0")
    app.state.config = config
    app.state.segmenter = segmenter
    app.state.chat = chat

    async def read_body(request: Request):
        raw = await request.body()
        if len(raw) > config.max_request_bytes:
            return None, _error(413, f"request exceeds {config.max_request_bytes} bytes")
        try:
            return json.loads(raw), None
        except (ValueError, UnicodeDecodeError):
            return None, _error(400, "request body is not valid JSON")

    @app.get("/healthz")
    async def healthz():
        roles = []
        if segmenter is not None:
            roles.append("segment")
        if chat is not None:
            roles.append("chat")
        return {"status": "ok", "roles": roles}

    @app.post("/v1/segment")
    async def segment(request: Request):
        if segmenter is None:
            return _error(503, "segmenter role is disabled")
        body, failure = await read_body(request)
        if failure is not None:
            return failure
        problem = _validate_segment_request(body)
        if problem is not None:
            return _error(400, problem)
        try:
            frames = decode_frames(body["frames"], body.get("frame_encoding", "path"))
        except FramesUndecodable as exc:
            return _error(422, str(exc))
        try:
            with gate:
                return JSONResponse(segmenter.segment(body, frames))
        except QueueFull:
            return _error(503, "inference queue is full", headers={"Retry-After": "1"})
        except ModelNotLoaded as exc:
            return _error(503, str(exc))

    async def chat_completions(request: Request):
        if chat is None:
            return _error(503, "chat role is disabled")
        body, failure = await read_body(request)
        if failure is not None:
            return failure
        problem = _validate_chat_request(body)
        if problem is not None:
            return _error(400, problem)
        try:
            return JSONResponse(chat.complete(body))
        except UpstreamFailure as exc:
            return _error(502, str(exc), headers={"Retry-After": str(exc.retry_after)})

    app.post("/chat/completions")(chat_completions)
    app.post("/v1/chat/completions")(chat_completions)
    return app
