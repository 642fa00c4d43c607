"""Parser and validator for tagged responses.

A well-formed response is a sequence of top-level blocks: SUMMARY,
CAPTION, REASONING, CONCLUSION exactly once and in that order, with any
number of REFLECTION blocks interleaved at top level (before SUMMARY or
after CONCLUSION is order-legal). Blocks cannot nest or overlap, and no
text may appear outside a block.

``parse`` is total: rule breaches are collected as violations on the
result, never raised. Best effort on malformed input keeps the outermost
open block and treats misplaced tags as its content.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .vocab import Vocabulary, default_vocab

BLOCK_KINDS = ("SUMMARY", "CAPTION", "REASONING", "REFLECTION", "CONCLUSION")
REQUIRED_ORDER = ("SUMMARY", "CAPTION", "REASONING", "CONCLUSION")

OPEN_TAGS = {f"<{k}>": k for k in BLOCK_KINDS}
CLOSE_TAGS = {f"</{k}>": k for k in BLOCK_KINDS}

# Violation kinds, the full breach taxonomy:
#   missing-block, duplicate-block, block-order, unclosed-tag,
#   overlapping-tags, nested-tag, stray-text


@dataclass(frozen=True)
class Violation:
    kind: str
    position: int
    detail: str


@dataclass(frozen=True)
class Block:
    kind: str
    start: int  # token span [start, end), tags included
    end: int
    text: tuple  # content tokens, tags excluded


@dataclass
class StructuredResponse:
    tokens: tuple
    blocks: list[Block] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def blocks_of(self, kind: str) -> list[Block]:
        return [b for b in self.blocks if b.kind == kind]

    def serialize(self) -> tuple:
        out: list[str] = []
        for b in self.blocks:
            out.append(f"<{b.kind}>")
            out.extend(b.text)
            out.append(f"</{b.kind}>")
        return tuple(out)


@dataclass(frozen=True)
class ReflectionStats:
    n_r: int
    l_r_total: int
    lengths: tuple


def parse(response, vocab: Vocabulary | None = None) -> StructuredResponse:
    """Parse tokens (str or id list) or free text into blocks + violations."""
    vocab = vocab or default_vocab()
    if isinstance(response, str):
        tokens = tuple(vocab.tokenize_text(response))
    else:
        tokens = tuple(
            vocab.token_of(t) if isinstance(t, (int,)) and not isinstance(t, bool) else str(t)
            for t in response
        )

    resp = StructuredResponse(tokens=tokens)
    open_kind: str | None = None
    open_start = 0
    content: list[str] = []
    stray_run_start: int | None = None

    def flush_stray(end: int) -> None:
        nonlocal stray_run_start
        if stray_run_start is not None:
            resp.violations.append(
                Violation("stray-text", stray_run_start, f"tokens [{stray_run_start}, {end}) outside any block")
            )
            stray_run_start = None

    for i, tok in enumerate(tokens):
        if tok in OPEN_TAGS:
            if open_kind is None:
                flush_stray(i)
                open_kind = OPEN_TAGS[tok]
                open_start = i
                content = []
            else:
                resp.violations.append(
                    Violation("nested-tag", i, f"{tok} opened inside {open_kind}")
                )
                content.append(tok)
        elif tok in CLOSE_TAGS:
            kind = CLOSE_TAGS[tok]
            if open_kind == kind:
                resp.blocks.append(Block(kind=kind, start=open_start, end=i + 1, text=tuple(content)))
                open_kind = None
                content = []
            elif open_kind is None:
                flush_stray(i)
                resp.violations.append(
                    Violation("overlapping-tags", i, f"{tok} closes a block that is not open")
                )
            else:
                resp.violations.append(
                    Violation("overlapping-tags", i, f"{tok} inside {open_kind}")
                )
                content.append(tok)
        else:
            if open_kind is None:
                if stray_run_start is None:
                    stray_run_start = i
            else:
                content.append(tok)

    flush_stray(len(tokens))
    if open_kind is not None:
        resp.violations.append(
            Violation("unclosed-tag", open_start, f"<{open_kind}> never closed")
        )
        resp.blocks.append(Block(kind=open_kind, start=open_start, end=len(tokens), text=tuple(content)))

    _check_structure(resp)
    return resp


def _check_structure(resp: StructuredResponse) -> None:
    seen: dict[str, int] = {}
    ordered: list[str] = []
    for b in resp.blocks:
        if b.kind == "REFLECTION":
            continue
        if b.kind in seen:
            resp.violations.append(
                Violation("duplicate-block", b.start, f"{b.kind} appears more than once")
            )
        else:
            seen[b.kind] = b.start
            ordered.append(b.kind)
    for kind in REQUIRED_ORDER:
        if kind not in seen:
            resp.violations.append(Violation("missing-block", len(resp.tokens), f"{kind} absent"))
    expected = [k for k in REQUIRED_ORDER if k in seen]
    if ordered != expected:
        resp.violations.append(
            Violation("block-order", 0, f"non-reflection blocks in order {ordered}, expected {expected}")
        )


def reflection_stats(resp: StructuredResponse) -> ReflectionStats:
    lengths = tuple(len(b.text) for b in resp.blocks_of("REFLECTION"))
    return ReflectionStats(n_r=len(lengths), l_r_total=sum(lengths), lengths=lengths)


_NUMBER = re.compile(r"^\d+$")
_OPTION_WORDS = ("yes", "no", "nothing")
_COLOR_WORDS = ("red", "green", "blue", "yellow")
_SHAPE_WORDS = ("square", "circle", "triangle")


def extract_conclusion(resp: StructuredResponse) -> str | None:
    """Normalized answer from the CONCLUSION block, or None when absent.

    Extraction rule, in priority order over the normalized (lowercased,
    whitespace-collapsed) conclusion text: the trailing number wins; else
    the trailing option word (yes/no/nothing); else the trailing
    "color shape" pair; else the whole normalized text.
    """
    blocks = resp.blocks_of("CONCLUSION")
    if not blocks:
        return None
    words = [w.lower() for w in blocks[-1].text]
    numbers = [w for w in words if _NUMBER.match(w)]
    if numbers:
        return numbers[-1]
    options = [w for w in words if w in _OPTION_WORDS]
    if options:
        return options[-1]
    pairs = [
        f"{a} {b}"
        for a, b in zip(words, words[1:])
        if a in _COLOR_WORDS and b in _SHAPE_WORDS
    ]
    if pairs:
        return pairs[-1]
    return " ".join(words)
