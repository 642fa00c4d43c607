"""Synthetic scene generator: grid scenes, QA templates, and gold traces.

A scene is a small grid of shaped, colored objects. Questions are
rendered from four fixed templates; answers come from direct scene
inspection. Gold traces are tagged responses (summary, caption,
reasoning, exactly one reflection, conclusion) used as cold-start
supervision and as hallucination-free references for metric checks.

Every occupied cell maps to one visual token id encoding
(cell, shape, color); empty cells map to the shared blank id 0, so the
visual prefix length equals ``width * height`` for every scene of a
given size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .vocab import Vocabulary, default_vocab

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
TEMPLATES = ("count_color", "count_shape", "exists_object", "attribute_of_position")

DATASET_VERSION = 1


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")

    @property
    def label(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    cells: tuple  # row-major tuple of Optional[SceneObject]

    def __post_init__(self):
        if len(self.cells) != self.width * self.height:
            raise ValueError("cell count does not match extents")
        n = sum(1 for c in self.cells if c is not None)
        if not 1 <= n <= self.width * self.height:
            raise ValueError("scene must hold between 1 and width*height objects")

    def objects(self) -> Iterator[tuple[int, int, SceneObject]]:
        """Yield (row, column, object) for occupied cells in row-major order."""
        for idx, obj in enumerate(self.cells):
            if obj is not None:
                yield idx // self.width, idx % self.width, obj

    def object_labels(self) -> frozenset:
        return frozenset(obj.label for _, _, obj in self.objects())

    def at(self, row: int, col: int) -> Optional[SceneObject]:
        return self.cells[row * self.width + col]

    def visual_token_ids(self) -> list[int]:
        """One id per cell: 0 for blank, else 1 + (cell, shape, color) bucket."""
        ids = []
        for idx, obj in enumerate(self.cells):
            if obj is None:
                ids.append(0)
            else:
                bucket = SHAPES.index(obj.shape) * len(COLORS) + COLORS.index(obj.color)
                ids.append(1 + idx * (len(SHAPES) * len(COLORS)) + bucket)
        return ids


def visual_vocab_size(width: int = 4, height: int = 4) -> int:
    return 1 + width * height * len(SHAPES) * len(COLORS)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 4
    height: int = 4
    min_objects: int = 1
    max_objects: int = 3

    def __post_init__(self):
        if not (1 <= self.width <= 16 and 1 <= self.height <= 16):
            raise ValueError("grid extents must be in 1..16")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.width * self.height:
            raise ValueError("requested objects exceed cell count")
        if self.max_objects > 16:
            raise ValueError("counts above 16 are outside the numeral vocabulary")


@dataclass(frozen=True)
class QAItem:
    scene: Scene
    question: tuple  # question tokens
    gold_answer: str
    gold_objects: frozenset
    template_id: str


@dataclass(frozen=True)
class GoldTrace:
    qa: QAItem
    tokens: tuple

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    rng = np.random.default_rng(seed)
    n_cells = config.width * config.height
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    slots = rng.choice(n_cells, size=count, replace=False)
    cells: list[Optional[SceneObject]] = [None] * n_cells
    for slot in sorted(int(s) for s in slots):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        cells[slot] = SceneObject(shape=shape, color=color)
    return Scene(width=config.width, height=config.height, cells=tuple(cells))


# --- answer semantics -------------------------------------------------------

def answer_for(scene: Scene, template_id: str, params: dict) -> str:
    """Gold answer by direct scene inspection (the template evaluator)."""
    if template_id == "count_color":
        n = sum(1 for _, _, o in scene.objects() if o.color == params["color"])
        return str(n)
    if template_id == "count_shape":
        n = sum(1 for _, _, o in scene.objects() if o.shape == params["shape"])
        return str(n)
    if template_id == "exists_object":
        present = any(
            o.color == params["color"] and o.shape == params["shape"]
            for _, _, o in scene.objects()
        )
        return "yes" if present else "no"
    if template_id == "attribute_of_position":
        obj = scene.at(params["row"], params["col"])
        return obj.label if obj is not None else "nothing"
    raise ValueError(f"unknown template {template_id!r}")


def render_question(template_id: str, params: dict) -> tuple:
    if template_id == "count_color":
        return ("how", "many", params["color"], "objects", "are", "in", "the", "image")
    if template_id == "count_shape":
        return ("how", "many", params["shape"], "objects", "are", "in", "the", "image")
    if template_id == "exists_object":
        return ("is", "there", "a", params["color"], params["shape"], "in", "the", "image")
    if template_id == "attribute_of_position":
        return ("what", "is", "at", "row", str(params["row"]), "column", str(params["col"]))
    raise ValueError(f"unknown template {template_id!r}")


def parse_question(question: tuple) -> tuple[str, dict]:
    """Recover (template_id, params) from rendered question tokens.

    Independent of ``render_question``'s internals: keys off the leading
    words, so renderer and evaluator can be cross-checked.
    """
    q = tuple(question)
    if q[:2] == ("how", "many") and len(q) == 8:
        word = q[2]
        if word in COLORS:
            return "count_color", {"color": word}
        if word in SHAPES:
            return "count_shape", {"shape": word}
    if q[:3] == ("is", "there", "a") and len(q) == 8:
        return "exists_object", {"color": q[3], "shape": q[4]}
    if q[:4] == ("what", "is", "at", "row") and len(q) == 7:
        return "attribute_of_position", {"row": int(q[4]), "col": int(q[6])}
    raise ValueError(f"unrecognized question {q!r}")


def generate_qa(scene: Scene, template_id: str, seed: int) -> QAItem:
    """Render one question for the scene; the answer comes from inspection."""
    if template_id not in TEMPLATES:
        raise ValueError(f"unknown template {template_id!r}")
    rng = np.random.default_rng(seed)
    objs = list(scene.objects())

    if template_id == "count_color":
        params = {"color": COLORS[int(rng.integers(len(COLORS)))]}
    elif template_id == "count_shape":
        params = {"shape": SHAPES[int(rng.integers(len(SHAPES)))]}
    elif template_id == "exists_object":
        present_labels = {(o.color, o.shape) for _, _, o in objs}
        absent = [
            (c, s) for c in COLORS for s in SHAPES if (c, s) not in present_labels
        ]
        # Half the questions probe absent objects: deliberate hallucination bait.
        if absent and (not present_labels or rng.random() < 0.5):
            color, shape = absent[int(rng.integers(len(absent)))]
        else:
            color, shape = sorted(present_labels)[int(rng.integers(len(present_labels)))]
        params = {"color": color, "shape": shape}
    else:
        r, c, _ = objs[int(rng.integers(len(objs)))]
        params = {"row": r, "col": c}

    return QAItem(
        scene=scene,
        question=render_question(template_id, params),
        gold_answer=answer_for(scene, template_id, params),
        gold_objects=scene.object_labels(),
        template_id=template_id,
    )


# --- gold traces ------------------------------------------------------------

def _caption_tokens(scene: Scene) -> list[str]:
    words = ["the", "image", "shows"]
    for i, (r, c, obj) in enumerate(scene.objects()):
        if i > 0:
            words.append("and")
        words += ["a", obj.color, obj.shape, "at", "row", str(r), "column", str(c)]
    return words


def _reasoning_tokens(scene: Scene, template_id: str, params: dict, answer: str) -> list[str]:
    words: list[str] = []
    if template_id == "count_color":
        color = params["color"]
        hits = [(r, c, o) for r, c, o in scene.objects() if o.color == color]
        for r, c, o in hits:
            words += ["the", o.shape, "at", "row", str(r), "column", str(c), "is", color]
        if not hits:
            words += ["no", color, "objects", "appear", "in", "the", "image"]
        words += ["that", "makes", answer, color, "objects"]
    elif template_id == "count_shape":
        shape = params["shape"]
        hits = [(r, c, o) for r, c, o in scene.objects() if o.shape == shape]
        for r, c, o in hits:
            words += ["there", "is", "a", shape, "at", "row", str(r), "column", str(c)]
        if not hits:
            words += ["no", shape, "objects", "appear", "in", "the", "image"]
        words += ["that", "makes", answer, shape, "objects"]
    elif template_id == "exists_object":
        color, shape = params["color"], params["shape"]
        hit = next(
            ((r, c) for r, c, o in scene.objects() if o.color == color and o.shape == shape),
            None,
        )
        if hit is not None:
            words += ["there", "is", "a", color, shape, "at", "row", str(hit[0]), "column", str(hit[1])]
            words += ["so", "the", "answer", "is", "yes"]
        else:
            words += ["no", color, shape, "appears", "in", "the", "image", "so", "the", "answer", "is", "no"]
    else:
        r, c = params["row"], params["col"]
        obj = scene.at(r, c)
        if obj is None:
            words += ["the", "cell", "at", "row", str(r), "column", str(c), "holds", "nothing"]
        else:
            words += ["the", "cell", "at", "row", str(r), "column", str(c), "holds", "a", obj.color, obj.shape]
    return words


def _reflection_tokens(template_id: str, params: dict, answer: str) -> list[str]:
    words = ["let", "me", "look", "at", "the", "image", "again", "to", "verify"]
    if template_id == "count_color":
        words += ["i", "recount", "the", params["color"], "objects", "and", "still", "find", answer]
    elif template_id == "count_shape":
        words += ["i", "recount", "the", params["shape"], "objects", "and", "still", "find", answer]
    elif template_id == "exists_object":
        if answer == "yes":
            words += ["i", "see", "the", params["color"], params["shape"], "again", "so", "yes", "is", "confirmed"]
        else:
            words += ["i", "do", "not", "see", "a", params["color"], params["shape"], "so", "no", "is", "confirmed"]
    else:
        words += ["row", str(params["row"]), "column", str(params["col"]), "indeed", "holds", "the"] + answer.split()
    return words


def _summary_tokens(template_id: str, params: dict) -> list[str]:
    if template_id == "count_color":
        return ["i", "will", "count", "the", params["color"], "objects", "in", "the", "image"]
    if template_id == "count_shape":
        return ["i", "will", "count", "the", params["shape"], "objects", "in", "the", "image"]
    if template_id == "exists_object":
        return ["i", "will", "check", "whether", "a", params["color"], params["shape"], "is", "present"]
    return ["i", "will", "identify", "the", "object", "at", "row", str(params["row"]), "column", str(params["col"])]


def gold_trace(qa: QAItem, vocab: Vocabulary | None = None) -> GoldTrace:
    """Tagged gold response with exactly one reflection block."""
    vocab = vocab or default_vocab()
    template_id, params = parse_question(qa.question)
    answer = qa.gold_answer
    tokens: list[str] = []
    tokens += ["<SUMMARY>"] + _summary_tokens(template_id, params) + ["</SUMMARY>"]
    tokens += ["<CAPTION>"] + _caption_tokens(qa.scene) + ["</CAPTION>"]
    tokens += ["<REASONING>"] + _reasoning_tokens(qa.scene, template_id, params, answer) + ["</REASONING>"]
    tokens += ["<REFLECTION>"] + _reflection_tokens(template_id, params, answer) + ["</REFLECTION>"]
    tokens += ["<CONCLUSION>", "the", "answer", "is"] + answer.split() + ["</CONCLUSION>"]
    for t in tokens:
        if t not in vocab:
            raise ValueError(f"gold trace uses out-of-vocabulary token {t!r}")
    return GoldTrace(qa=qa, tokens=tuple(tokens))


# --- dataset file format ----------------------------------------------------
#
# Line-delimited JSON, one QAItem per line. Field order is fixed:
#   version, seed, scene {width, height, cells [[row, col, shape, color]...]},
#   question [tokens], gold_answer, gold_objects [sorted labels],
#   template_id, trace (space-joined tokens or null)

def _scene_to_json(scene: Scene) -> dict:
    return {
        "width": scene.width,
        "height": scene.height,
        "cells": [[r, c, o.shape, o.color] for r, c, o in scene.objects()],
    }


def _scene_from_json(d: dict) -> Scene:
    cells: list[Optional[SceneObject]] = [None] * (d["width"] * d["height"])
    for r, c, shape, color in d["cells"]:
        cells[r * d["width"] + c] = SceneObject(shape=shape, color=color)
    return Scene(width=d["width"], height=d["height"], cells=tuple(cells))


def write_dataset(path, records: list[tuple[int, QAItem, Optional[GoldTrace]]]) -> int:
    """Write (seed, item, trace) records; returns the number written."""
    with open(path, "w") as f:
        for seed, qa, trace in records:
            row = {
                "version": DATASET_VERSION,
                "seed": seed,
                "scene": _scene_to_json(qa.scene),
                "question": list(qa.question),
                "gold_answer": qa.gold_answer,
                "gold_objects": sorted(qa.gold_objects),
                "template_id": qa.template_id,
                "trace": trace.text if trace is not None else None,
            }
            f.write(json.dumps(row) + "\n")
    return len(records)


def read_dataset(path) -> list[tuple[QAItem, Optional[GoldTrace]]]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("version") != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {row.get('version')!r}")
            qa = QAItem(
                scene=_scene_from_json(row["scene"]),
                question=tuple(row["question"]),
                gold_answer=row["gold_answer"],
                gold_objects=frozenset(row["gold_objects"]),
                template_id=row["template_id"],
            )
            trace = None
            if row["trace"]:
                trace = GoldTrace(qa=qa, tokens=tuple(row["trace"].split()))
            out.append((qa, trace))
    return out


def synthesize(
    n: int,
    seed: int,
    config: SceneConfig = SceneConfig(),
    templates: tuple = TEMPLATES,
    with_traces: bool = True,
    vocab: Vocabulary | None = None,
) -> list[tuple[int, QAItem, Optional[GoldTrace]]]:
    """Generate n dataset records deterministically from (seed, config)."""
    vocab = vocab or default_vocab()
    out = []
    for i in range(n):
        item_seed = seed * 1_000_003 + i
        scene = generate_scene(item_seed, config)
        template = templates[i % len(templates)]
        qa = generate_qa(scene, template, item_seed + 500_009)
        trace = gold_trace(qa, vocab) if with_traces else None
        out.append((item_seed, qa, trace))
    return out
