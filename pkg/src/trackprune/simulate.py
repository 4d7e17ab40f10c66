"""Synthetic benchmark generation and a ground-truth-scripted reasoner.

`generate_benchmark` builds deterministic worlds of labeled moving shapes,
expressions over them, palette ground truth, and a rule file that lets
`WorldOracle` answer every pipeline prompt from world knowledge alone. The
oracle re-identifies candidates from the structured candidate block in each
prompt (existence frames plus anchor-frame centroid), so it needs no access
to pipeline internals.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from trackprune import maskops
from trackprune.perception import SimObject, SimWorld
from trackprune.reasoning import (
    BINARY_DECISION_RULES,
    TEMPLATE_MARKERS,
    ChatMessage,
    ReasonerBackend,
    parse_candidate_lines,
)

_QUERY_RE = re.compile(r'^Query: "(.*)"$', re.MULTILINE)
_ROUND_LINE_RE = re.compile(r"^Round \d+:", re.MULTILINE)
_REFINEMENT_RE = re.compile(r"^Refinement round: (\d+) of (\d+)$", re.MULTILINE)

_COLORS = [
    ("red", (205, 45, 45)),
    ("blue", (50, 80, 210)),
    ("green", (55, 170, 70)),
    ("yellow", (225, 205, 60)),
    ("white", (235, 235, 235)),
    ("purple", (140, 60, 180)),
    ("orange", (230, 135, 45)),
]
_FAMILIES = [
    ("vehicle", ["car", "bus", "truck"]),
    ("animal", ["cat", "dog", "sheep"]),
    ("toy", ["ball", "block", "ring"]),
]
_BACKGROUND = (26, 26, 32)
_CANVAS_W, _CANVAS_H = 96, 72


# ---------------------------------------------------------------------------
# expression rules


@dataclass(frozen=True)
class ObjectRule:
    """How the oracle judges one world object during pruning.

    Before `ready_at` rounds have passed the object stays uncertain; in binary
    rounds it falls back to `binary_guess`.
    """

    verdict: str  # "accept" | "reject"
    ready_at: int = 0
    binary_guess: str = "reject"


@dataclass(frozen=True)
class ExpressionRule:
    query: str
    video_id: str
    tag: str  # "referring" | "reasoning"
    concept_rounds: tuple[dict, ...]  # {"query_type": str, "pairs": [[core, broad], ...]}
    target_object_ids: tuple[int, ...]
    object_rules: dict[int, ObjectRule]
    appearance_required: bool = False
    appearance: dict[int, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "query": self.query,
            "video_id": self.video_id,
            "tag": self.tag,
            "concept_rounds": [dict(r) for r in self.concept_rounds],
            "target_object_ids": list(self.target_object_ids),
            "object_rules": {
                str(obj_id): {
                    "verdict": rule.verdict,
                    "ready_at": rule.ready_at,
                    "binary_guess": rule.binary_guess,
                }
                for obj_id, rule in sorted(self.object_rules.items())
            },
            "appearance_required": self.appearance_required,
            "appearance": {str(k): v for k, v in sorted(self.appearance.items())},
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ExpressionRule":
        return cls(
            query=obj["query"],
            video_id=obj["video_id"],
            tag=obj["tag"],
            concept_rounds=tuple(obj["concept_rounds"]),
            target_object_ids=tuple(obj["target_object_ids"]),
            object_rules={
                int(k): ObjectRule(
                    verdict=v["verdict"], ready_at=v["ready_at"], binary_guess=v["binary_guess"]
                )
                for k, v in obj["object_rules"].items()
            },
            appearance_required=obj["appearance_required"],
            appearance={int(k): v for k, v in obj["appearance"].items()},
        )


# ---------------------------------------------------------------------------
# world (de)serialization


def world_to_json_dict(world: SimWorld) -> dict:
    return {
        "video_id": world.video_id,
        "width": world.width,
        "height": world.height,
        "num_frames": world.num_frames,
        "background": list(world.background),
        "seed": world.seed,
        "objects": [
            {
                "object_id": obj.object_id,
                "labels": sorted(obj.concept_labels),
                "shape": obj.shape,
                "color": list(obj.color),
                "placements": {str(t): list(box) for t, box in sorted(obj.placements.items())},
            }
            for obj in world.objects
        ],
    }


def world_from_json_dict(obj: dict) -> SimWorld:
    objects = tuple(
        SimObject(
            object_id=entry["object_id"],
            concept_labels=frozenset(entry["labels"]),
            shape=entry["shape"],
            color=tuple(entry["color"]),
            placements={int(t): tuple(box) for t, box in entry["placements"].items()},
        )
        for entry in obj["objects"]
    )
    return SimWorld(
        video_id=obj["video_id"],
        width=obj["width"],
        height=obj["height"],
        num_frames=obj["num_frames"],
        background=tuple(obj["background"]),
        objects=objects,
        seed=obj.get("seed", 0),
    )


def save_worlds(worlds: list[SimWorld], path) -> None:
    payload = {"videos": [world_to_json_dict(w) for w in worlds]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_worlds(path) -> list[SimWorld]:
    payload = json.loads(Path(path).read_text())
    return [world_from_json_dict(entry) for entry in payload["videos"]]


def save_rules(rules: dict[str, ExpressionRule], path) -> None:
    payload = {"expressions": [rules[k].to_json_dict() for k in sorted(rules)]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_rules(path) -> dict[str, ExpressionRule]:
    payload = json.loads(Path(path).read_text())
    rules = {}
    for entry in payload["expressions"]:
        rule = ExpressionRule.from_json_dict(entry)
        rules[rule.query] = rule
    return rules


# ---------------------------------------------------------------------------
# ground-truth-scripted reasoner


class WorldOracleError(Exception):
    pass


class WorldOracle(ReasonerBackend):
    """Answers the pipeline's prompts from ground-truth world knowledge.

    Routing relies on the default templates' first lines; candidate identity
    is recovered from the prompt's candidate block by matching existence
    frames and anchor-frame centroid against the world's objects.
    """

    def __init__(self, worlds: list[SimWorld] | dict[str, SimWorld], rules: dict[str, ExpressionRule]):
        if isinstance(worlds, list):
            worlds = {w.video_id: w for w in worlds}
        self.worlds = dict(worlds)
        self.rules = dict(rules)

    # -- plumbing

    def _rule_for(self, text: str) -> ExpressionRule:
        match = _QUERY_RE.search(text)
        if not match:
            raise WorldOracleError("prompt has no query line")
        query = match.group(1)
        rule = self.rules.get(query)
        if rule is None:
            raise WorldOracleError(f"no rule for query {query!r}")
        return rule

    def _match_candidates(self, rule: ExpressionRule, text: str) -> dict[int, int | None]:
        """Map candidate track ids from the prompt to world object ids."""
        world = self.worlds[rule.video_id]
        mapping: dict[int, int | None] = {}
        for entry in parse_candidate_lines(text):
            mapping[entry["id"]] = self._identify(world, entry)
        return mapping

    @staticmethod
    def _identify(world: SimWorld, entry: dict) -> int | None:
        frames = tuple(entry.get("frames", ()))
        position = entry.get("position")
        anchor = entry.get("anchor_frame")
        for obj in world.objects:
            if obj.existence() != frames:
                continue
            if position is None or anchor is None:
                return obj.object_id
            raster = obj.raster_at(anchor, world.height, world.width)
            if raster is None:
                continue
            cx, cy = maskops.mask_centroid(raster)
            if abs(round(cx, 1) - position[0]) <= 0.06 and abs(round(cy, 1) - position[1]) <= 0.06:
                return obj.object_id
        return None

    # -- per-template replies

    def _concepts_reply(self, rule: ExpressionRule, round_index: int, referring_stage: bool) -> str:
        rounds = rule.concept_rounds
        entry = rounds[min(round_index, len(rounds) - 1)]
        if referring_stage and entry["query_type"] != "referring":
            return json.dumps({"query_type": "reasoning", "concept_pairs": []})
        return json.dumps(
            {
                "query_type": entry["query_type"],
                "concept_pairs": [{"core": c, "broad": b} for c, b in entry["pairs"]],
            }
        )

    def _select_reply(self, rule: ExpressionRule, text: str) -> str:
        match = _REFINEMENT_RE.search(text)
        if not match:
            raise WorldOracleError("select prompt lacks a round line")
        round_index = int(match.group(1)) - 1
        binary = "You must decide now" in text or BINARY_DECISION_RULES in text
        verdicts = []
        for track_id, obj_id in sorted(self._match_candidates(rule, text).items()):
            obj_rule = rule.object_rules.get(obj_id) if obj_id is not None else None
            if obj_rule is None:
                verdict = "reject" if binary else "uncertain"
                reason = "unrecognized candidate"
            elif round_index >= obj_rule.ready_at:
                verdict = obj_rule.verdict
                reason = "resolved from world knowledge"
            elif binary:
                verdict = obj_rule.binary_guess
                reason = "forced guess before evidence was sufficient"
            else:
                verdict = "uncertain"
                reason = "needs another look"
            verdicts.append({"id": track_id, "verdict": verdict, "reason": reason})
        return json.dumps({"verdicts": verdicts})

    def _appearance_reply(self, rule: ExpressionRule, text: str) -> str:
        descriptions = {}
        for track_id, obj_id in self._match_candidates(rule, text).items():
            if obj_id is not None and obj_id in rule.appearance:
                descriptions[str(track_id)] = rule.appearance[obj_id]
        return json.dumps({"descriptions": descriptions})

    def complete(self, messages: list[ChatMessage], temperature: float, max_tokens: int) -> str:
        text = "\n".join(m.text() for m in messages)
        rule = self._rule_for(text)
        if TEMPLATE_MARKERS["referring"] in text:
            return self._concepts_reply(rule, 0, referring_stage=True)
        if TEMPLATE_MARKERS["reasoning"] in text:
            round_index = len(_ROUND_LINE_RE.findall(text))
            return self._concepts_reply(rule, round_index, referring_stage=False)
        if TEMPLATE_MARKERS["appearance_requirement"] in text:
            return json.dumps({"required": rule.appearance_required})
        if TEMPLATE_MARKERS["appearance_retrieval"] in text:
            return self._appearance_reply(rule, text)
        if TEMPLATE_MARKERS["select"] in text:
            return self._select_reply(rule, text)
        raise WorldOracleError(f"unrecognized prompt: {text[:80]!r}")


# ---------------------------------------------------------------------------
# benchmark generation


def _bounce_path(rng: random.Random, width: int, obj_w: int, num_frames: int) -> list[int]:
    """Horizontal left-edge positions with wall bounces."""
    x = rng.randrange(0, width - obj_w)
    vx = rng.choice([-2, -1, 0, 1, 2])
    xs = []
    for _ in range(num_frames):
        xs.append(x)
        x += vx
        if x < 0 or x > width - obj_w:
            vx = -vx
            x += 2 * vx
        x = max(0, min(x, width - obj_w))
    return xs


def _build_object(
    rng: random.Random,
    object_id: int,
    kind: str,
    category: str,
    color_name: str,
    color: tuple[int, int, int],
    lane: tuple[int, int],
    num_frames: int,
    present: tuple[int, ...],
) -> SimObject:
    lane_top, lane_bottom = lane
    lane_h = lane_bottom - lane_top + 1
    obj_h = rng.randint(5, max(5, lane_h - 2))
    obj_w = rng.randint(8, 16)
    y0 = lane_top + rng.randint(0, max(0, lane_h - obj_h))
    xs = _bounce_path(rng, _CANVAS_W, obj_w, num_frames)
    placements = {t: (xs[t], y0, xs[t] + obj_w - 1, y0 + obj_h - 1) for t in present}
    return SimObject(
        object_id=object_id,
        concept_labels=frozenset({kind, category, f"{color_name} {kind}"}),
        shape=rng.choice(["rect", "ellipse"]),
        color=color,
        placements=placements,
    )


def _unique_query(base: str, used: set[str], clip_index: int) -> str:
    query = base
    if query in used:
        query = f"{base} in clip {clip_index}"
    suffix = 2
    while query in used:
        query = f"{base} in clip {clip_index}.{suffix}"
        suffix += 1
    used.add(query)
    return query


def generate_benchmark(seed: int, num_videos: int):
    """Deterministic worlds + expressions + oracle rules for one benchmark.

    Every video carries a referring expression resolved through appearance, a
    tie-selects-core referring expression, and a temporally ambiguous
    reasoning expression whose distractor resolves only after one or two
    pruning rounds. Selected videos add retry expressions (concepts that fail
    for one or two rounds), a multi-target expression, and one briefly
    visible object.
    """
    worlds: list[SimWorld] = []
    rules: dict[str, ExpressionRule] = {}
    meta: dict = {"videos": {}}
    used_queries: set[str] = set()

    for vi in range(num_videos):
        rng = random.Random(seed * 1_000_003 + vi)
        video_id = f"vid{vi:03d}"
        num_frames = 60 if vi == 0 else 24 + (vi * 3) % 16
        category, kinds_pool = _FAMILIES[vi % len(_FAMILIES)]
        num_objects = 3 + (vi % 3)

        # kinds: objects 1 and 2 share a kind; object 3 gets a unique kind
        kinds = [kinds_pool[0], kinds_pool[0], kinds_pool[1]]
        while len(kinds) < num_objects:
            kinds.append(kinds_pool[2] if len(kinds) % 2 else kinds_pool[1])
        colors = rng.sample(_COLORS, num_objects + (1 if vi == 0 else 0))

        num_lanes = num_objects + (1 if vi == 0 else 0)
        lane_h = _CANVAS_H // num_lanes
        lanes = [(i * lane_h + 1, (i + 1) * lane_h - 2) for i in range(num_lanes)]

        early_leave = tuple(range(max(2, int(num_frames * 0.4))))
        objects = []
        for i, kind in enumerate(kinds):
            object_id = i + 1
            present = early_leave if i == 1 else tuple(range(num_frames))
            color_name, color = colors[i]
            objects.append(
                _build_object(
                    rng, object_id, kind, category, color_name, color,
                    lanes[i], num_frames, present,
                )
            )
        if vi == 0:
            # one object visible in only 2 of 60 frames
            hand_color_name, hand_color = colors[num_objects]
            t0 = num_frames // 2
            objects.append(
                _build_object(
                    rng, num_objects + 1, "hand", "body part", hand_color_name, hand_color,
                    lanes[num_objects], num_frames, (t0, t0 + 3),
                )
            )

        world = SimWorld(
            video_id=video_id,
            width=_CANVAS_W,
            height=_CANVAS_H,
            num_frames=num_frames,
            background=_BACKGROUND,
            objects=tuple(objects),
            seed=seed,
        )
        worlds.append(world)

        color_of = {obj.object_id: colors[i][0] for i, obj in enumerate(objects)}
        kind_of = {objects[i].object_id: kinds[i] for i in range(num_objects)}
        if vi == 0:
            kind_of[num_objects + 1] = "hand"
        appearance_all = {
            obj.object_id: f"{color_of[obj.object_id]} {kind_of[obj.object_id]}"
            for obj in objects
        }

        def base_rules(targets, overrides=None):
            out = {
                obj.object_id: ObjectRule(verdict="reject", ready_at=0, binary_guess="reject")
                for obj in objects
            }
            for obj_id in targets:
                out[obj_id] = ObjectRule(verdict="accept", ready_at=0, binary_guess="accept")
            for obj_id, rule in (overrides or {}).items():
                out[obj_id] = rule
            return out

        expressions = {}

        def add_expression(eid, rule: ExpressionRule):
            expressions[eid] = {
                "exp": rule.query,
                "obj_id": sorted(rule.target_object_ids),
                "tag": rule.tag,
            }
            rules[rule.query] = rule

        dup_kind = kinds[0]
        unique_kind = kinds[2]

        # e0: referring, resolved through appearance descriptions
        target0 = objects[0].object_id
        q0 = _unique_query(f"the {color_of[target0]} {dup_kind}", used_queries, vi)
        add_expression(
            "e0",
            ExpressionRule(
                query=q0,
                video_id=video_id,
                tag="referring",
                concept_rounds=(
                    {"query_type": "referring", "pairs": [[f"{color_of[target0]} {dup_kind}", dup_kind]]},
                ),
                target_object_ids=(target0,),
                object_rules=base_rules([target0]),
                appearance_required=True,
                appearance=appearance_all,
            ),
        )

        # e1: referring with a unique kind; core and broad counts tie -> core
        target1 = objects[2].object_id
        q1 = _unique_query(f"the {color_of[target1]} {unique_kind}", used_queries, vi)
        add_expression(
            "e1",
            ExpressionRule(
                query=q1,
                video_id=video_id,
                tag="referring",
                concept_rounds=(
                    {"query_type": "referring", "pairs": [[f"{color_of[target1]} {unique_kind}", unique_kind]]},
                ),
                target_object_ids=(target1,),
                object_rules=base_rules([target1]),
            ),
        )

        # e2: reasoning with a temporally ambiguous same-kind distractor.
        # Even videos target the early-leaver; odd videos target the stayer,
        # leaving the early-leaver uncertain so the temporal scope visibly
        # shrinks to its short window.
        early_obj = objects[1].object_id
        stayer = objects[0].object_id
        ambiguous_ready = 1 + ((vi // 2) % 2)
        if vi % 2 == 0:
            q2_text = f"the {dup_kind} that disappears from the scene first"
            e2_target, e2_ambiguous = early_obj, stayer
        else:
            q2_text = f"the {dup_kind} that stays in view until the end"
            e2_target, e2_ambiguous = stayer, early_obj
        q2 = _unique_query(q2_text, used_queries, vi)
        add_expression(
            "e2",
            ExpressionRule(
                query=q2,
                video_id=video_id,
                tag="reasoning",
                concept_rounds=({"query_type": "reasoning", "pairs": [[dup_kind, category]]},),
                target_object_ids=(e2_target,),
                object_rules=base_rules(
                    [e2_target],
                    overrides={
                        e2_ambiguous: ObjectRule(
                            verdict="reject", ready_at=ambiguous_ready, binary_guess="accept"
                        )
                    },
                ),
            ),
        )

        # extras
        if vi == 0:
            hand_id = num_objects + 1
            q3 = _unique_query("the hand that appears for just a moment", used_queries, vi)
            add_expression(
                "e3",
                ExpressionRule(
                    query=q3,
                    video_id=video_id,
                    tag="reasoning",
                    concept_rounds=({"query_type": "reasoning", "pairs": [["hand", "body part"]]},),
                    target_object_ids=(hand_id,),
                    object_rules=base_rules([hand_id]),
                ),
            )
        elif vi % 4 == 1 or vi == 7:
            rounds_before_success = 2 if vi == 7 else 1
            failing = [
                {"query_type": "reasoning", "pairs": [["phantom", "apparition"]]},
                {"query_type": "reasoning", "pairs": [["mirage", "illusion"]]},
            ][:rounds_before_success]
            target3 = objects[2].object_id
            q3 = _unique_query(
                f"the {unique_kind} that is hard to name at first glance", used_queries, vi
            )
            add_expression(
                "e3",
                ExpressionRule(
                    query=q3,
                    video_id=video_id,
                    tag="reasoning",
                    concept_rounds=tuple(
                        failing + [{"query_type": "reasoning", "pairs": [[unique_kind, category]]}]
                    ),
                    target_object_ids=(target3,),
                    object_rules=base_rules([target3]),
                ),
            )
        elif vi % 4 == 3:
            pair_ids = (objects[0].object_id, objects[1].object_id)
            q3 = _unique_query(f"both of the {dup_kind}s", used_queries, vi)
            add_expression(
                "e3",
                ExpressionRule(
                    query=q3,
                    video_id=video_id,
                    tag="referring",
                    concept_rounds=(
                        {"query_type": "referring", "pairs": [[dup_kind, category]]},
                    ),
                    target_object_ids=pair_ids,
                    object_rules=base_rules(list(pair_ids)),
                ),
            )

        meta["videos"][video_id] = {
            "frames": [f"{t:05d}.png" for t in range(num_frames)],
            "expressions": expressions,
        }

    return worlds, rules, meta


def write_benchmark(out_dir, worlds: list[SimWorld], rules: dict[str, ExpressionRule], meta: dict) -> None:
    """Materialize a benchmark: frames, palette GT, meta, world and rule files."""
    out = Path(out_dir)
    frames_root = out / "frames"
    ann_root = out / "annotations"
    for world in worlds:
        frame_dir = frames_root / world.video_id
        ann_dir = ann_root / world.video_id
        frame_dir.mkdir(parents=True, exist_ok=True)
        ann_dir.mkdir(parents=True, exist_ok=True)
        for t in range(world.num_frames):
            Image.fromarray(world.render_frame(t)).save(frame_dir / f"{t:05d}.png")
            ann = np.zeros((world.height, world.width), dtype=np.uint8)
            for obj in world.objects:
                raster = obj.raster_at(t, world.height, world.width)
                if raster is not None:
                    ann[raster.astype(bool)] = obj.object_id
            Image.fromarray(ann, mode="L").save(ann_dir / f"{t:05d}.png")
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    save_worlds(worlds, out / "sim_world.json")
    save_rules(rules, out / "oracle_rules.json")
