"""Live-socket round trip: the engine's own HTTP clients against the adapter."""

import socket
import threading
import time

import pytest

trackprune = pytest.importorskip("trackprune")

import uvicorn

from conftest import load_golden
from trackprune.model import VideoRef
from trackprune.reasoning import HttpReasonerClient, user_message
from trackprune.perception import HttpPerceptionClient
from trackprune_adapter.app import create_app
from trackprune_adapter.chat import StubChat
from trackprune_adapter.config import AdapterConfig


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def live_adapter():
    port = free_port()
    chat = StubChat([(r"red car", '{"verdicts": [{"id": 0, "verdict": "accept", "reason": "ok"}]}')])
    app = create_app(AdapterConfig(), chat=chat)
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    import requests

    url = f"http://127.0.0.1:{port}"
    while time.time() < deadline:
        try:
            if requests.get(f"{url}/healthz", timeout=1).status_code == 200:
                break
        except requests.RequestException:
            time.sleep(0.05)
    else:
        raise RuntimeError("adapter did not come up")
    yield url, chat
    server.should_exit = True
    thread.join(timeout=5)


def test_engine_perception_client_round_trip(live_adapter):
    url, _ = live_adapter
    golden = load_golden("segment_roundtrip")
    video = VideoRef(
        video_id="golden-vid",
        frame_paths=("frames/golden-vid/00000.png", "frames/golden-vid/00001.png"),
        width=8,
        height=6,
    )
    client = HttpPerceptionClient(url, sleep=lambda _: None)
    tracks = client.segment_concept(video, "red car")
    expected_ids = [t["track_id"] for t in golden["response"]["tracks"]]
    assert [t.track_id for t in tracks] == expected_ids
    for track, golden_track in zip(tracks, golden["response"]["tracks"]):
        assert {str(t): m.payload.to_json_dict() for t, m in track.masks.items()} == golden_track["masks"]


def test_engine_reasoner_client_round_trip(live_adapter):
    url, chat = live_adapter
    client = HttpReasonerClient(url, model="golden-model", api_key=None, sleep=lambda _: None)
    reply = client.complete(
        [user_message("is this the red car?", images=[b"\x89PNG fake"])],
        temperature=0.2,
        max_tokens=8192,
    )
    assert "accept" in reply
    assert chat.last_payload["temperature"] == 0.2
    assert chat.last_payload["max_tokens"] == 8192
    image_part = chat.last_payload["messages"][0]["content"][1]
    assert image_part["type"] == "image_url"
    assert image_part["image_url"]["url"].startswith("data:image/png;base64,")
