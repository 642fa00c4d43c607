"""Hallucination and attention diagnostics.

Object mentions are exact "color shape" bigrams over the closed scene
lexicon, extracted from a configurable set of blocks (final conclusions
by default; add the caption to score full descriptions). Corpus scores:
the hallucinated fraction of all mentions, the fraction of responses
with at least one hallucination, and object recall.

The visual-dependence probe scores each generated position twice, with
the real visual prefix and with every visual position blanked, and
reports the log-prob gap: zero gap means the visual context carries no
information for that token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grammar import StructuredResponse
from .model import AttnRecord, InjectionEvent, Model, attention_to_visual
from .scenes import COLORS, SHAPES

BLANK_VISUAL_ID = 0
DEFAULT_MENTION_BLOCKS = ("CONCLUSION",)


class UndefinedMetricError(ValueError):
    """The metric's denominator is empty on this corpus."""


@dataclass(frozen=True)
class ObjectMentionReport:
    generated: frozenset
    gold: frozenset

    @property
    def hallucinated(self) -> frozenset:
        return self.generated - self.gold

    @property
    def recalled(self) -> frozenset:
        return self.generated & self.gold


def extract_object_mentions(resp: StructuredResponse, blocks=DEFAULT_MENTION_BLOCKS) -> frozenset:
    """All "color shape" bigrams in the chosen blocks."""
    mentions = set()
    for block in resp.blocks:
        if block.kind not in blocks:
            continue
        words = [w.lower() for w in block.text]
        for a, b in zip(words, words[1:]):
            if a in COLORS and b in SHAPES:
                mentions.add(f"{a} {b}")
    return frozenset(mentions)


def build_report(resp: StructuredResponse, gold_objects, blocks=DEFAULT_MENTION_BLOCKS) -> ObjectMentionReport:
    return ObjectMentionReport(
        generated=extract_object_mentions(resp, blocks),
        gold=frozenset(gold_objects),
    )


def chair_i(reports) -> float:
    """Hallucinated fraction of all generated object mentions."""
    generated = sum(len(r.generated) for r in reports)
    if generated == 0:
        raise UndefinedMetricError("no generated object mentions in the corpus")
    hallucinated = sum(len(r.hallucinated) for r in reports)
    return hallucinated / generated


def chair_s(reports) -> float:
    """Fraction of responses containing at least one hallucinated object."""
    if not reports:
        raise UndefinedMetricError("empty corpus")
    return sum(1 for r in reports if r.hallucinated) / len(reports)


def recall(reports) -> float:
    """Recalled fraction of all gold objects."""
    gold = sum(len(r.gold) for r in reports)
    if gold == 0:
        raise UndefinedMetricError("no gold objects in the corpus")
    recalled = sum(len(r.recalled) for r in reports)
    return recalled / gold


@dataclass(frozen=True)
class AttentionProfile:
    bucket_width: int
    means: tuple  # mean visual-attention mass per step bucket
    counts: tuple  # samples per bucket


def attention_profile(runs, bucket_width: int = 1) -> AttentionProfile:
    """Bucketed mean visual-attention mass across runs.

    ``runs`` holds either AttnRecords or plain per-step mass sequences.
    """
    if bucket_width < 1:
        raise ValueError("bucket_width must be at least 1")
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for run in runs:
        series = mass_series(run) if isinstance(run, AttnRecord) else run
        for t, mass in enumerate(series):
            b = t // bucket_width
            sums[b] = sums.get(b, 0.0) + float(mass)
            counts[b] = counts.get(b, 0) + 1
    n = max(sums) + 1 if sums else 0
    return AttentionProfile(
        bucket_width=bucket_width,
        means=tuple(sums.get(b, 0.0) / counts.get(b, 1) for b in range(n)),
        counts=tuple(counts.get(b, 0) for b in range(n)),
    )


def mass_series(record: AttnRecord) -> list:
    return [attention_to_visual(record, t) for t in range(len(record.steps))]


def least_squares_slope(ys) -> float:
    """Slope of the least-squares line through (0, y0), (1, y1), ..."""
    y = np.asarray(ys, dtype=np.float64)
    if y.size < 2:
        raise ValueError("need at least two points for a slope")
    x = np.arange(y.size, dtype=np.float64)
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def sign_test_p(successes: int, trials: int) -> float:
    """One-sided exact binomial tail P(X >= successes) under p = 1/2."""
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    total = sum(math.comb(trials, k) for k in range(successes, trials + 1))
    return total / 2.0**trials


def mi_proxy(model: Model, items, window: int = 16):
    """Per-response visual-dependence: log-prob gaps vs a blanked prefix.

    ``items`` are (visual_ids, text_ids, response_tokens, script) tuples.
    Returns a list of (per_position_delta, window_means) pairs.
    """
    out = []
    for visual_ids, text_ids, response, script in items:
        with_vis = model.score_response(visual_ids, text_ids, response, script).data.astype(np.float64)
        blank_vis = [BLANK_VISUAL_ID] * len(visual_ids)
        blank_script = [
            InjectionEvent(step=e.step, mode=e.mode, injected_ids=(BLANK_VISUAL_ID,) * len(e.injected_ids))
            for e in script
        ]
        without = model.score_response(blank_vis, text_ids, response, blank_script).data.astype(np.float64)
        delta = with_vis - without
        means = tuple(
            float(delta[i: i + window].mean()) for i in range(0, len(delta), window)
        )
        out.append((delta, means))
    return out
