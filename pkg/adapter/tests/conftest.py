import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from trackprune_adapter.app import create_app
from trackprune_adapter.chat import StubChat
from trackprune_adapter.config import AdapterConfig
from trackprune_adapter.segmenter import StubSegmenter

# contract artifacts published by the engine's test suite
ENGINE_TESTS = Path(__file__).resolve().parents[2] / "tests"
SCHEMAS = ENGINE_TESTS / "schemas"
GOLDEN = ENGINE_TESTS / "golden"


def load_schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def load_golden(name):
    return json.loads((GOLDEN / f"{name}.json").read_text())


@pytest.fixture
def stub_chat():
    return StubChat(
        [
            (r"red car", '{"verdicts": [{"id": 0, "verdict": "accept", "reason": "red car"}]}'),
            (r"classify", '{"verdicts": []}'),
        ]
    )


@pytest.fixture
def stub_segmenter():
    return StubSegmenter()


@pytest.fixture
def client(stub_segmenter, stub_chat):
    app = create_app(AdapterConfig(), segmenter=stub_segmenter, chat=stub_chat)
    return TestClient(app)
