import base64
import json
import random
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from trackprune.model import BitMask, ConceptPair, MaskTrack, PipelineConfig, QueryType, Verdict, VerdictState
from trackprune.reasoning import (
    BINARY_DECISION_RULES,
    TEMPLATE_IDS,
    TEMPLATE_MARKERS,
    TERNARY_DECISION_RULES,
    ChatMessage,
    HttpReasonerClient,
    ImagePart,
    MissingPlaceholder,
    ParseError,
    PromptTemplate,
    ScriptedReasoner,
    ScriptError,
    TextPart,
    TruncatedResponse,
    UnusedBinding,
    ask_and_parse,
    candidate_lines,
    format_appearance,
    format_failed_pairs,
    format_frame_ranges,
    load_templates,
    parse_candidate_lines,
    parse_concepts,
    parse_descriptions,
    parse_frame_ranges,
    parse_required,
    parse_verdicts,
    render_prompt,
    serialize_verdicts,
    user_message,
)


class TestTemplates:
    def test_all_templates_load_and_carry_markers(self):
        templates = load_templates()
        assert set(templates) == set(TEMPLATE_IDS)
        for template_id, template in templates.items():
            assert template.body.startswith(TEMPLATE_MARKERS[template_id])

    def test_render_substitutes(self):
        t = PromptTemplate("select", "ids: ${candidates} / q: ${query}")
        out = render_prompt(t, {"candidates": "Object 0\nObject 1", "query": "the cat"})
        assert "Object 0" in out and "Object 1" in out and "the cat" in out

    def test_missing_placeholder(self):
        t = PromptTemplate("x", "hello ${name}")
        with pytest.raises(MissingPlaceholder):
            render_prompt(t, {})

    def test_unused_binding(self):
        t = PromptTemplate("x", "hello ${name}")
        with pytest.raises(UnusedBinding):
            render_prompt(t, {"name": "a", "extra": "b"})

    def test_render_is_deterministic(self):
        t = load_templates()["referring"]
        a = render_prompt(t, {"query": "the red car"})
        assert a == render_prompt(t, {"query": "the red car"})

    def test_binary_rules_have_no_uncertain_option(self):
        assert "uncertain" not in BINARY_DECISION_RULES.lower()
        assert "uncertain" in TERNARY_DECISION_RULES.lower()
        # the select template body itself must stay mode-neutral
        assert "uncertain" not in load_templates()["select"].body.lower()

    def test_custom_template_directory(self, tmp_path):
        for template_id in TEMPLATE_IDS:
            (tmp_path / f"{template_id}.txt").write_text(f"custom {template_id} ${{query}}")
        templates = load_templates(tmp_path)
        assert templates["select"].body.startswith("custom select")


class TestParseConcepts:
    def test_fenced_json_with_tuple_pairs(self):
        text = (
            "Sure, here is my analysis:\n```json\n"
            '{"query_type": "referring", "concept_pairs": [["person", "human"], ["couch", "furniture"]]}'
            "\n```\nLet me know if you need more."
        )
        resp = parse_concepts(text)
        assert resp.query_type is QueryType.REFERRING
        assert resp.pairs == (
            ConceptPair("person", "human"),
            ConceptPair("couch", "furniture"),
        )

    def test_object_style_pairs(self):
        text = '{"query_type": "reasoning", "concept_pairs": [{"core": "cat", "broad": "animal"}]}'
        resp = parse_concepts(text)
        assert resp.query_type is QueryType.REASONING
        assert resp.pairs[0].core == "cat"

    def test_reasoning_with_empty_pairs(self):
        resp = parse_concepts('{"query_type": "reasoning", "concept_pairs": []}')
        assert resp.query_type is QueryType.REASONING
        assert resp.pairs == ()

    def test_referring_with_empty_pairs_rejected(self):
        with pytest.raises(ParseError):
            parse_concepts('{"query_type": "referring", "concept_pairs": []}')

    def test_no_json(self):
        with pytest.raises(ParseError):
            parse_concepts("I could not find any objects, sorry.")

    def test_prose_wrapped_json_fuzz(self):
        rng = random.Random(99)
        words = ["well", "object", "frame", "let's", "{", "}", "maybe:", '"quote"', "done."]
        payload = '{"query_type": "referring", "concept_pairs": [{"core": "dog", "broad": "animal"}]}'
        for _ in range(100):
            prefix = " ".join(rng.choices(words, k=rng.randint(0, 12)))
            suffix = " ".join(rng.choices(words, k=rng.randint(0, 12)))
            resp = parse_concepts(f"{prefix}\n{payload}\n{suffix}")
            assert resp.pairs[0] == ConceptPair("dog", "animal")

    def test_skips_invalid_object_and_finds_valid(self):
        text = (
            '{"query_type": "nonsense"}\n'
            '{"query_type": "referring", "concept_pairs": [{"core": "a", "broad": "b"}]}'
        )
        assert parse_concepts(text).pairs[0].core == "a"


class TestParseVerdicts:
    def test_walkthrough_partition(self):
        text = json.dumps(
            {
                "verdicts": [
                    {"id": 0, "verdict": "uncertain", "reason": "both cars visible"},
                    {"id": 1, "verdict": "uncertain", "reason": "both cars visible"},
                    {"id": 2, "verdict": "reject", "reason": "a bicycle"},
                    {"id": 3, "verdict": "reject", "reason": "a bicycle"},
                ]
            }
        )
        resp = parse_verdicts(text, {0, 1, 2, 3})
        states = {i: v.state for i, v in resp.verdicts.items()}
        assert states == {
            0: VerdictState.UNCERTAIN,
            1: VerdictState.UNCERTAIN,
            2: VerdictState.REJECTED,
            3: VerdictState.REJECTED,
        }

    def test_missing_id_defaults_uncertain(self):
        text = '{"verdicts": [{"id": 0, "verdict": "accept", "reason": "match"}]}'
        resp = parse_verdicts(text, {0, 1})
        assert resp.verdicts[0].state is VerdictState.ACCEPTED
        assert resp.verdicts[1].state is VerdictState.UNCERTAIN

    def test_stray_id_ignored(self):
        text = json.dumps(
            {
                "verdicts": [
                    {"id": 0, "verdict": "accept", "reason": ""},
                    {"id": 99, "verdict": "reject", "reason": "stray"},
                ]
            }
        )
        resp = parse_verdicts(text, {0})
        assert set(resp.verdicts) == {0}

    def test_no_json_raises(self):
        with pytest.raises(ParseError):
            parse_verdicts("all of them look fine to me", {0})

    def test_round_trip_serialization(self):
        rng = random.Random(5)
        for _ in range(25):
            verdicts = {
                i: Verdict(state=rng.choice(list(VerdictState)), rationale=f"r{i}")
                for i in range(rng.randint(1, 6))
            }
            resp = parse_verdicts(serialize_verdicts(verdicts), set(verdicts))
            assert resp.verdicts == verdicts

    def test_requires_expected_ids(self):
        with pytest.raises(ValueError):
            parse_verdicts("{}", set())


class TestAuxParsers:
    def test_parse_required(self):
        assert parse_required('{"required": true}') is True
        assert parse_required('noise {"required": false} noise') is False
        with pytest.raises(ParseError):
            parse_required('{"required": "yes"}')

    def test_parse_descriptions(self):
        out = parse_descriptions('{"descriptions": {"0": "white car", "1": "red car"}}')
        assert out == {0: "white car", 1: "red car"}
        with pytest.raises(ParseError):
            parse_descriptions('{"descriptions": ["white"]}')

    def test_frame_ranges_round_trip(self):
        rng = random.Random(3)
        for _ in range(50):
            frames = tuple(sorted(rng.sample(range(60), rng.randint(0, 20))))
            assert parse_frame_ranges(format_frame_ranges(frames)) == frames
        assert format_frame_ranges([0, 1, 2, 5, 7, 8]) == "0-2, 5, 7-8"

    def test_candidate_lines_round_trip(self):
        raster = np.zeros((10, 12), dtype=np.uint8)
        raster[2:5, 3:7] = 1
        track = MaskTrack(track_id=4, concept="red car", masks={7: BitMask.from_array(raster)})
        text = candidate_lines([track])
        parsed = parse_candidate_lines(text)
        assert parsed == [
            {
                "id": 4,
                "concept": "red car",
                "frames": (7,),
                "position": (4.5, 3.0),
                "anchor_frame": 7,
            }
        ]

    def test_failed_pairs_formatting(self):
        assert format_failed_pairs([]) == "(none)"
        fail = [[ConceptPair("paper", "sheet")], [ConceptPair("card", "object")]]
        text = format_failed_pairs(fail)
        assert text.splitlines() == ['Round 1: "paper" / "sheet"', 'Round 2: "card" / "object"']

    def test_appearance_formatting(self):
        assert format_appearance({}) == "(none)"
        assert format_appearance({1: "red car", 0: "white car"}).splitlines() == [
            "Object 0: white car",
            "Object 1: red car",
        ]


class TestScriptedReasoner:
    def test_canned_reply_verbatim(self):
        oracle = ScriptedReasoner([(r"Task: classify", '{"verdicts": []}')])
        out = oracle.complete([user_message("Task: classify the marked candidates")], 0.2, 100)
        assert out == '{"verdicts": []}'

    def test_no_match_raises(self):
        oracle = ScriptedReasoner([])
        with pytest.raises(ScriptError):
            oracle.complete([user_message("anything")], 0.2, 100)

    def test_callable_rule_sees_images(self):
        oracle = ScriptedReasoner([(r".", lambda text, images: str(len(images)))])
        msg = user_message("look", images=[b"a", b"b"])
        assert oracle.complete([msg], 0.2, 10) == "2"

    def test_ask_and_parse_reasks_once(self):
        replies = iter(["not json at all", '{"required": true}'])
        oracle = ScriptedReasoner([(r".", lambda text, images: next(replies))])
        cfg = PipelineConfig()
        assert ask_and_parse(oracle, [user_message("check")], parse_required, cfg) is True
        assert len(oracle.transcript) == 2
        assert "valid JSON only" in oracle.transcript[1]["text"]

    def test_ask_and_parse_double_failure_raises(self):
        oracle = ScriptedReasoner([(r".", "still not json")])
        with pytest.raises(ParseError):
            ask_and_parse(oracle, [user_message("check")], parse_required, PipelineConfig())


class _ChatHandler(BaseHTTPRequestHandler):
    responses = []
    seen = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        _ChatHandler.seen.append(
            {"path": self.path, "headers": dict(self.headers), "body": json.loads(self.rfile.read(length))}
        )
        status, body = _ChatHandler.responses.pop(0)
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    server = HTTPServer(("127.0.0.1", 0), _ChatHandler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    _ChatHandler.responses = []
    _ChatHandler.seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def completion(text, finish_reason="stop"):
    return {"choices": [{"message": {"content": text}, "finish_reason": finish_reason}]}


class TestHttpReasonerClient:
    def test_payload_carries_temperature_and_token_limit(self, chat_server):
        _ChatHandler.responses = [(200, completion("ok"))]
        client = HttpReasonerClient(chat_server, model="m1", api_key="sekrit", sleep=lambda _: None)
        out = client.complete([user_message("hello")], temperature=0.2, max_tokens=8192)
        assert out == "ok"
        sent = _ChatHandler.seen[0]
        assert sent["path"] == "/chat/completions"
        assert sent["body"]["temperature"] == 0.2
        assert sent["body"]["max_tokens"] == 8192
        assert sent["body"]["model"] == "m1"
        assert sent["headers"]["Authorization"] == "Bearer sekrit"

    def test_image_part_round_trips_as_data_url(self, chat_server):
        png = b"\x89PNG fake bytes \x00\x01"
        _ChatHandler.responses = [(200, completion("ok"))]
        client = HttpReasonerClient(chat_server, api_key=None, sleep=lambda _: None)
        client.complete([user_message("look", images=[png])], 0.2, 64)
        content = _ChatHandler.seen[0]["body"]["messages"][0]["content"]
        image_entries = [c for c in content if c["type"] == "image_url"]
        assert len(image_entries) == 1
        url = image_entries[0]["image_url"]["url"]
        assert url.startswith("data:image/png;base64,")
        assert base64.b64decode(url.split(",", 1)[1]) == png

    def test_truncation_surfaced(self, chat_server):
        _ChatHandler.responses = [(200, completion("partial", finish_reason="length"))]
        client = HttpReasonerClient(chat_server, sleep=lambda _: None)
        with pytest.raises(TruncatedResponse) as err:
            client.complete([user_message("hi")], 0.2, 16)
        assert err.value.text == "partial"

    def test_retries_then_succeeds(self, chat_server):
        _ChatHandler.responses = [(503, {}), (200, completion("late"))]
        client = HttpReasonerClient(chat_server, sleep=lambda _: None)
        assert client.complete([user_message("hi")], 0.2, 16) == "late"

    def test_env_key_pickup(self, chat_server, monkeypatch):
        monkeypatch.setenv("TRACKPRUNE_REASONER_KEY", "from-env")
        _ChatHandler.responses = [(200, completion("ok"))]
        client = HttpReasonerClient(chat_server, sleep=lambda _: None)
        client.complete([user_message("hi")], 0.2, 16)
        assert _ChatHandler.seen[0]["headers"]["Authorization"] == "Bearer from-env"


class TestChatMessage:
    def test_role_validation(self):
        with pytest.raises(ValueError):
            ChatMessage(role="assistant", parts=(TextPart("x"),))
        with pytest.raises(ValueError):
            ChatMessage(role="user", parts=())

    def test_text_and_images_accessors(self):
        msg = ChatMessage(role="user", parts=(TextPart("a"), ImagePart(b"p"), TextPart("b")))
        assert msg.text() == "a\nb"
        assert msg.images() == [b"p"]
