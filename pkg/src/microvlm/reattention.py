"""Decode-time visual re-attention: token COPY, token ROUTE, and ratios.

When the policy emits the reflection-open tag, the hook displaces that
freshly emitted tag behind a block of re-presented visual tokens, so the
reflection text starts generating right after the copied (or routed)
visual context. COPY re-presents the whole original visual prefix; ROUTE
re-presents only the top-m% original visual tokens ranked by the
generation-so-far's averaged attention to them. Every insertion is
recorded in the injection script so log-prob scoring can replay it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import (
    GENERATED,
    INJECTED_VISUAL,
    VISUAL,
    AttnRecord,
    InjectionEvent,
    Model,
    SamplingHook,
    SequenceState,
)

MODES = ("off", "text_only", "vision_only", "vtc", "vtr")


@dataclass(frozen=True)
class ReattentionConfig:
    mode: str = "off"
    m: float = 50.0  # routing percentage
    max_injections: int = 8  # per response

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown re-attention mode {self.mode!r}")
        if not 0.0 <= self.m <= 100.0:
            raise ValueError("m must be a percentage in [0, 100]")
        if self.max_injections < 0:
            raise ValueError("max_injections must be nonnegative")


@dataclass(frozen=True)
class VisualRatio:
    l_x: int
    l_c: int
    l_y: int
    k: int

    @property
    def r(self) -> float:
        total = self.l_x + self.l_c + self.l_y
        return self.l_c / total if total else 0.0

    @property
    def r_prime(self) -> float:
        total = self.l_x + self.l_c + self.l_y + self.k
        return (self.l_c + self.k) / total if total else 0.0


def visual_ratio(state: SequenceState) -> VisualRatio:
    l_x, l_c, l_y, k = state.counts()
    return VisualRatio(l_x=l_x, l_c=l_c, l_y=l_y, k=k)


def aggregate_visual_attention(record: AttnRecord, upto_step: Optional[int] = None) -> np.ndarray:
    """Per original visual token: generation-averaged, layer/head-averaged attention.

    Averages the first ``upto_step`` generated steps (all recorded steps when
    omitted); only the original visual span is scored, never injected copies.
    """
    n = len(record.steps) if upto_step is None else upto_step
    if n <= 0:
        raise ValueError("need at least one generated step to aggregate attention")
    if n > len(record.steps):
        raise ValueError(f"only {len(record.steps)} steps recorded, asked for {n}")
    lo, hi = record.visual_span
    out = np.zeros(hi - lo, dtype=np.float64)
    for step in record.steps[:n]:
        out += step.weights[:, :, lo:hi].mean(axis=(0, 1))
    return out / n


def select_top_m(scores, m: float) -> list:
    """Indices of the ceil(m% * L_c) best-scoring visual tokens.

    Ties break toward the lower original index; the result is sorted by
    original index so spatial order is preserved.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 <= m <= 100.0:
        raise ValueError("m must be in [0, 100]")
    count = math.ceil(m / 100.0 * scores.size)
    if count == 0:
        return []
    order = sorted(range(scores.size), key=lambda j: (-scores[j], j))
    return sorted(order[:count])


def _inject(state: SequenceState, injected_ids: list) -> int:
    """Displace the freshly emitted token behind a block of visual ids."""
    origin, token = state.pop_unprocessed()
    assert origin == GENERATED
    for vid in injected_ids:
        state.append(INJECTED_VISUAL, vid)
    state.append(origin, token)
    return len(injected_ids)


def _original_visual_ids(state: SequenceState) -> list:
    lo, hi = state.visual_span()
    return state.ids[lo:hi]


def _room_for(state: SequenceState, k: int) -> bool:
    return state.remaining_capacity() >= k


def apply_vtc(state: SequenceState) -> int:
    """Copy the complete original visual prefix in front of the new token.

    Returns k, the number of injected positions (0 when capacity is short:
    the insertion is skipped rather than truncated).
    """
    ids = _original_visual_ids(state)
    if not _room_for(state, len(ids)):
        return 0
    return _inject(state, ids)


def apply_vtr(state: SequenceState, record: AttnRecord, m: float) -> int:
    """Route the top-m% visual tokens (by aggregated attention) forward.

    With no generated steps recorded yet the scores are uniform, so the
    tie rule selects the first ceil(m% * L_c) tokens.
    """
    ids = _original_visual_ids(state)
    if len(record.steps) > 0:
        scores = aggregate_visual_attention(record)
    else:
        scores = np.zeros(len(ids))
    chosen = select_top_m(scores, m)
    picked = [ids[j] for j in chosen]
    if not _room_for(state, len(picked)):
        return 0
    return _inject(state, picked)


def reflection_hook(cfg: ReattentionConfig, reflection_open_id: int, reflection_close_id: int) -> Optional[SamplingHook]:
    """Build the sampling hook for a re-attention mode.

    off / text_only: no hook (identical sampling to a hook-free run).
    vtc: copy all visual tokens at each reflection open.
    vtr: route the top-m% visual tokens at each reflection open.
    vision_only: copy, then force the reflection closed (empty text).
    """
    if cfg.mode in ("off", "text_only"):
        return None

    def hook(model: Model, state: SequenceState, token: int, record, script) -> None:
        if token != reflection_open_id:
            return
        injections_so_far = sum(1 for e in script if e.injected_ids)
        step = _generated_count(state) - 1  # index of the emitted token
        if cfg.mode == "vtr":
            if record is None:
                raise RuntimeError("VTR needs attention recording enabled")
            if injections_so_far >= cfg.max_injections:
                k = 0
            else:
                k = apply_vtr(state, record, cfg.m)
            injected = tuple(state.ids[len(state) - 1 - k: len(state) - 1])
            script.append(InjectionEvent(step=step, mode="vtr", injected_ids=injected))
        else:  # vtc and vision_only share the copy
            if injections_so_far >= cfg.max_injections:
                k = 0
            else:
                k = apply_vtc(state)
            injected = tuple(state.ids[len(state) - 1 - k: len(state) - 1])
            script.append(InjectionEvent(step=step, mode=cfg.mode, injected_ids=injected))
            if cfg.mode == "vision_only":
                if state.remaining_capacity() >= 1:
                    state.append(GENERATED, reflection_close_id)

    return hook


def _generated_count(state: SequenceState) -> int:
    return state.origins.count(GENERATED)
