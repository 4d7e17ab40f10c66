"""Chat-reasoning backends: prompt templates, structured-output parsing, clients."""

from __future__ import annotations

import base64
import json
import os
import re
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import requests

from trackprune import maskops
from trackprune.perception import ProtocolError, TransportError
from trackprune.model import (
    ConceptPair,
    MaskTrack,
    QueryType,
    Verdict,
    VerdictState,
    temporal_existence,
)

REASONER_KEY_ENV = "TRACKPRUNE_REASONER_KEY"

TEMPLATE_IDS = ("referring", "reasoning", "appearance_requirement", "appearance_retrieval", "select")

# First line of each shipped template; scripted backends route requests by these.
TEMPLATE_MARKERS = {
    "referring": "Task: query analysis and concept extraction from text.",
    "reasoning": "Task: concept extraction from the query and sampled video frames.",
    "appearance_requirement": "Task: decide whether appearance details are required.",
    "appearance_retrieval": "Task: describe the appearance of each candidate object.",
    "select": "Task: classify the marked candidate objects against the query.",
}

TERNARY_DECISION_RULES = (
    'Classify every candidate id listed above as "accept" (clearly the object '
    'the query refers to), "reject" (clearly not), or "uncertain" (the evidence '
    "shown is not enough to decide)."
)
BINARY_DECISION_RULES = (
    'This is the final round. Classify every candidate id listed above as '
    '"accept" (the object the query refers to) or "reject" (not the object). '
    "You must decide now; no other verdict is allowed."
)

_PLACEHOLDER_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_FENCE_RE = re.compile(r"```[a-zA-Z]*\s*(.*?)```", re.DOTALL)


class TemplateError(Exception):
    pass


class MissingPlaceholder(TemplateError):
    pass


class UnusedBinding(TemplateError):
    pass


class ParseError(Exception):
    """The model reply contained no schema-valid JSON object."""


class TruncatedResponse(Exception):
    """The backend hit its output-token limit; .text carries the partial reply."""

    def __init__(self, text: str):
        super().__init__("response truncated at the output-token limit")
        self.text = text


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    png: bytes = field(repr=False)


@dataclass(frozen=True)
class ChatMessage:
    role: str  # "system" | "user"
    parts: tuple

    def __post_init__(self):
        if self.role not in ("system", "user"):
            raise ValueError(f"unsupported role {self.role!r}")
        if not self.parts:
            raise ValueError("message must have at least one part")

    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    def images(self) -> list[bytes]:
        return [p.png for p in self.parts if isinstance(p, ImagePart)]


def user_message(text: str, images: list[bytes] | None = None) -> ChatMessage:
    parts: list = [TextPart(text)]
    parts.extend(ImagePart(png) for png in (images or []))
    return ChatMessage(role="user", parts=tuple(parts))


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.body))


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load the five prompt templates from a directory (default: packaged set)."""
    templates = {}
    for template_id in TEMPLATE_IDS:
        if directory is None:
            body = (resources.files("trackprune") / "templates" / f"{template_id}.txt").read_text()
        else:
            body = (Path(directory) / f"{template_id}.txt").read_text()
        templates[template_id] = PromptTemplate(template_id=template_id, body=body)
    return templates


def render_prompt(template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Strict substitution: every placeholder bound, every binding used."""
    placeholders = template.placeholders()
    missing = placeholders - bindings.keys()
    if missing:
        raise MissingPlaceholder(f"{template.template_id}: unbound {sorted(missing)}")
    unused = bindings.keys() - placeholders
    if unused:
        raise UnusedBinding(f"{template.template_id}: unused {sorted(unused)}")
    return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template.body)


# ---------------------------------------------------------------------------
# structured responses


@dataclass(frozen=True)
class ConceptResponse:
    query_type: QueryType
    pairs: tuple[ConceptPair, ...]

    def __post_init__(self):
        if self.query_type not in (QueryType.REFERRING, QueryType.REASONING):
            raise ValueError("concept response must classify the query")
        if self.query_type is QueryType.REFERRING and not self.pairs:
            raise ValueError("referring responses must carry concept pairs")


@dataclass(frozen=True)
class VerdictResponse:
    verdicts: dict[int, Verdict]


def _iter_json_objects(text: str):
    """Yield every decodable JSON object in the text, fenced blocks first."""
    decoder = json.JSONDecoder()
    seen_spans = []
    for fenced in _FENCE_RE.findall(text):
        chunk = fenced.strip()
        for start in range(len(chunk)):
            if chunk[start] != "{":
                continue
            try:
                obj, _ = decoder.raw_decode(chunk[start:])
            except ValueError:
                continue
            if isinstance(obj, dict):
                yield obj
            break
    pos = 0
    while True:
        start = text.find("{", pos)
        if start < 0:
            return
        try:
            obj, consumed = decoder.raw_decode(text[start:])
        except ValueError:
            pos = start + 1
            continue
        if isinstance(obj, dict) and (start, start + consumed) not in seen_spans:
            seen_spans.append((start, start + consumed))
            yield obj
        pos = start + consumed


def _pair_from(entry) -> ConceptPair | None:
    if isinstance(entry, dict):
        core, broad = entry.get("core"), entry.get("broad")
    elif isinstance(entry, (list, tuple)) and len(entry) == 2:
        core, broad = entry
    else:
        return None
    if not isinstance(core, str) or not isinstance(broad, str):
        return None
    try:
        return ConceptPair(core=core.strip(), broad=broad.strip())
    except ValueError:
        return None


def parse_concepts(text: str) -> ConceptResponse:
    """Extract the first schema-valid concept-extraction reply from free text."""
    for obj in _iter_json_objects(text):
        qt = obj.get("query_type")
        if not isinstance(qt, str) or qt.strip().lower() not in ("referring", "reasoning"):
            continue
        raw_pairs = obj.get("concept_pairs")
        if not isinstance(raw_pairs, list):
            continue
        pairs = [_pair_from(e) for e in raw_pairs]
        if any(p is None for p in pairs):
            continue
        query_type = QueryType(qt.strip().lower())
        if query_type is QueryType.REFERRING and not pairs:
            continue
        return ConceptResponse(query_type=query_type, pairs=tuple(pairs))
    raise ParseError("no schema-valid concept response found")


_VERDICT_ALIASES = {
    "accept": VerdictState.ACCEPTED,
    "accepted": VerdictState.ACCEPTED,
    "reject": VerdictState.REJECTED,
    "rejected": VerdictState.REJECTED,
    "uncertain": VerdictState.UNCERTAIN,
}


def parse_verdicts(text: str, expected_ids: set[int]) -> VerdictResponse:
    """Parse per-candidate verdicts; missing ids default to Uncertain, strays drop."""
    if not expected_ids:
        raise ValueError("expected_ids must be non-empty")
    for obj in _iter_json_objects(text):
        raw = obj.get("verdicts")
        if not isinstance(raw, list):
            continue
        parsed: dict[int, Verdict] = {}
        valid = True
        for entry in raw:
            if not isinstance(entry, dict):
                valid = False
                break
            try:
                track_id = int(entry["id"])
            except (KeyError, TypeError, ValueError):
                valid = False
                break
            verdict_str = entry.get("verdict")
            state = _VERDICT_ALIASES.get(verdict_str.strip().lower()) if isinstance(verdict_str, str) else None
            if state is None:
                valid = False
                break
            reason = entry.get("reason", "")
            if track_id in expected_ids:
                parsed[track_id] = Verdict(state=state, rationale=reason if isinstance(reason, str) else "")
        if not valid:
            continue
        for track_id in expected_ids:
            parsed.setdefault(track_id, Verdict(state=VerdictState.UNCERTAIN, rationale="no verdict returned"))
        return VerdictResponse(verdicts=parsed)
    raise ParseError("no schema-valid verdict response found")


def serialize_verdicts(verdicts: dict[int, Verdict]) -> str:
    return json.dumps(
        {
            "verdicts": [
                {"id": track_id, "verdict": v.state.value, "reason": v.rationale}
                for track_id, v in sorted(verdicts.items())
            ]
        }
    )


def parse_required(text: str) -> bool:
    for obj in _iter_json_objects(text):
        if isinstance(obj.get("required"), bool):
            return obj["required"]
    raise ParseError("no schema-valid requirement response found")


def parse_descriptions(text: str) -> dict[int, str]:
    for obj in _iter_json_objects(text):
        raw = obj.get("descriptions")
        if not isinstance(raw, dict):
            continue
        out = {}
        valid = True
        for key, value in raw.items():
            try:
                track_id = int(key)
            except (TypeError, ValueError):
                valid = False
                break
            if not isinstance(value, str):
                valid = False
                break
            out[track_id] = value
        if valid:
            return out
    raise ParseError("no schema-valid description response found")


# ---------------------------------------------------------------------------
# prompt data formatting (kept next to the parsers that oracles use)


def format_frame_ranges(frames) -> str:
    frames = sorted(frames)
    if not frames:
        return "(never)"
    spans = []
    start = prev = frames[0]
    for t in frames[1:]:
        if t == prev + 1:
            prev = t
            continue
        spans.append((start, prev))
        start = prev = t
    spans.append((start, prev))
    return ", ".join(f"{a}" if a == b else f"{a}-{b}" for a, b in spans)


def parse_frame_ranges(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text == "(never)":
        return ()
    frames: list[int] = []
    for span in text.split(","):
        span = span.strip()
        if "-" in span:
            a, b = span.split("-")
            frames.extend(range(int(a), int(b) + 1))
        else:
            frames.append(int(span))
    return tuple(frames)


_CANDIDATE_LINE_RE = re.compile(
    r'Object (?P<id>\d+): concept "(?P<concept>[^"]*)"; visible in frames '
    r"(?P<frames>[^;]+?)(?:; position \((?P<x>-?\d+(?:\.\d+)?), (?P<y>-?\d+(?:\.\d+)?)\) "
    r"at frame (?P<t>\d+))?$"
)


def candidate_lines(tracks: list[MaskTrack]) -> str:
    """One structured line per candidate: id, concept, existence, anchor position."""
    lines = []
    for track in tracks:
        existence = temporal_existence(track)
        if existence.is_empty():
            lines.append(f'Object {track.track_id}: concept "{track.concept}"; visible in frames (never)')
            continue
        t = maskops.largest_area_frame(track)
        cx, cy = maskops.mask_centroid(track.masks[t].to_array())
        lines.append(
            f'Object {track.track_id}: concept "{track.concept}"; visible in frames '
            f"{format_frame_ranges(existence.frames)}; position ({cx:.1f}, {cy:.1f}) at frame {t}"
        )
    return "\n".join(lines)


def parse_candidate_lines(text: str) -> list[dict]:
    """Inverse of candidate_lines, for ground-truth-scripted backends."""
    out = []
    for line in text.splitlines():
        match = _CANDIDATE_LINE_RE.search(line.strip())
        if not match:
            continue
        entry = {
            "id": int(match.group("id")),
            "concept": match.group("concept"),
            "frames": parse_frame_ranges(match.group("frames")),
        }
        if match.group("x") is not None:
            entry["position"] = (float(match.group("x")), float(match.group("y")))
            entry["anchor_frame"] = int(match.group("t"))
        out.append(entry)
    return out


def format_failed_pairs(failure_set: list[list[ConceptPair]]) -> str:
    if not failure_set:
        return "(none)"
    lines = []
    for i, pairs in enumerate(failure_set, start=1):
        rendered = "; ".join(f'"{p.core}" / "{p.broad}"' for p in pairs) or "(no pairs)"
        lines.append(f"Round {i}: {rendered}")
    return "\n".join(lines)


def format_appearance(appearance: dict[int, str]) -> str:
    if not appearance:
        return "(none)"
    return "\n".join(f"Object {track_id}: {desc}" for track_id, desc in sorted(appearance.items()))


# ---------------------------------------------------------------------------
# backends


class ReasonerBackend(ABC):
    @abstractmethod
    def complete(self, messages: list[ChatMessage], temperature: float, max_tokens: int) -> str:
        """Return the raw model text for one chat exchange."""


RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.5


class HttpReasonerClient(ReasonerBackend):
    """Client for a chat-completions-compatible endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str = "default",
        api_key: str | None = None,
        timeout: float = 300.0,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(REASONER_KEY_ENV)
        self.timeout = timeout
        self.session = session or requests.Session()
        self._sleep = sleep

    @staticmethod
    def message_payload(message: ChatMessage) -> dict:
        content = []
        for part in message.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            elif isinstance(part, ImagePart):
                url = "data:image/png;base64," + base64.b64encode(part.png).decode("ascii")
                content.append({"type": "image_url", "image_url": {"url": url}})
            else:
                raise TypeError(f"unsupported part {part!r}")
        return {"role": message.role, "content": content}

    def build_payload(self, messages: list[ChatMessage], temperature: float, max_tokens: int) -> dict:
        return {
            "model": self.model,
            "messages": [self.message_payload(m) for m in messages],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }

    def complete(self, messages: list[ChatMessage], temperature: float, max_tokens: int) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        payload = self.build_payload(messages, temperature, max_tokens)
        url = f"{self.base_url}/chat/completions"
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_exc: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            try:
                resp = self.session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                self._sleep(RETRY_BASE_DELAY * (2 ** attempt))
                continue
            if resp.status_code in (502, 503, 504):
                last_exc = TransportError(f"{url} -> {resp.status_code}")
                self._sleep(RETRY_BASE_DELAY * (2 ** attempt))
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"{url} -> {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                choice = body["choices"][0]
                text = choice["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(f"{url} returned a malformed completion") from exc
            if choice.get("finish_reason") == "length":
                raise TruncatedResponse(text)
            return text
        raise TransportError(f"{url} unreachable after {RETRY_ATTEMPTS} attempts: {last_exc}")


class ScriptError(Exception):
    pass


class ScriptedReasoner(ReasonerBackend):
    """Deterministic test double: regex-matched prompt patterns to canned replies.

    Each rule is (pattern, response) where response is a string or a callable
    taking (prompt_text, images) and returning a string. The first matching
    rule wins; no match raises ScriptError. A transcript of every call is kept
    for assertions.
    """

    def __init__(self, rules):
        self.rules = [(re.compile(p, re.DOTALL), r) for p, r in rules]
        self.transcript: list[dict] = []

    def complete(self, messages: list[ChatMessage], temperature: float, max_tokens: int) -> str:
        text = "\n".join(m.text() for m in messages)
        images = [img for m in messages for img in m.images()]
        self.transcript.append(
            {"text": text, "num_images": len(images), "temperature": temperature, "max_tokens": max_tokens}
        )
        for pattern, response in self.rules:
            if pattern.search(text):
                return response(text, images) if callable(response) else response
        raise ScriptError(f"no scripted rule matches prompt: {text[:120]!r}...")


def ask_and_parse(reasoner: ReasonerBackend, messages: list[ChatMessage], parser, config):
    """One re-ask on ParseError: resend the malformed text with a JSON-only nudge."""
    try:
        text = reasoner.complete(messages, config.temperature, config.max_output_tokens)
    except TruncatedResponse as exc:
        text = exc.text
    try:
        return parser(text)
    except ParseError:
        nudge = user_message(
            "Your previous reply could not be parsed:\n"
            f"{text}\n"
            "Respond again with valid JSON only, matching the requested schema."
        )
        try:
            retry_text = reasoner.complete(messages + [nudge], config.temperature, config.max_output_tokens)
        except TruncatedResponse as exc:
            retry_text = exc.text
        return parser(retry_text)
