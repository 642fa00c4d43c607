"""Rule-based rollout rewards: format, accuracy, reflection balance.

Format demands a violation-free parse with at least one reflection
(configurable). Accuracy is exact match of the extracted conclusion
against the gold answer. Balance scores the mean reflection length
against an ideal value and is deliberately left unclipped below zero.
The composite is a weighted sum; the balance term is trusted only when
the format is valid, which blocks reward hacking via tag spam.
"""

from __future__ import annotations

from dataclasses import dataclass

from .grammar import ReflectionStats, StructuredResponse, extract_conclusion, reflection_stats


@dataclass(frozen=True)
class RewardConfig:
    ideal_reflection_len: float = 100.0  # mean reflection length scoring 1.0
    w_format: float = 1.0
    w_accuracy: float = 1.0
    w_balance: float = 1.0
    require_reflection: bool = True  # zero-reflection responses fail format

    def __post_init__(self):
        if self.ideal_reflection_len <= 0:
            raise ValueError("ideal_reflection_len must be positive")
        if min(self.w_format, self.w_accuracy, self.w_balance) < 0:
            raise ValueError("reward weights must be nonnegative")


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    accuracy: int
    balance: float  # gated value: 0 unless format == 1 and n_r >= 1
    composite: float
    w_format: float
    w_accuracy: float
    w_balance: float


def format_reward(resp: StructuredResponse, require_reflection: bool = True) -> int:
    if resp.violations:
        return 0
    if require_reflection and not resp.blocks_of("REFLECTION"):
        return 0
    return 1


def accuracy_reward(resp: StructuredResponse, gold_answer: str) -> int:
    answer = extract_conclusion(resp)
    return int(answer is not None and answer == gold_answer)


def reflection_balance_reward(stats: ReflectionStats, ideal_len: float) -> float:
    """1 - |mean_len - ideal| / ideal; 0 when there are no reflections."""
    if stats.n_r == 0:
        return 0.0
    mean_len = stats.l_r_total / stats.n_r
    return 1.0 - abs(mean_len - ideal_len) / ideal_len


def composite_reward(
    resp: StructuredResponse, gold_answer: str, cfg: RewardConfig = RewardConfig()
) -> RewardBreakdown:
    fmt = format_reward(resp, require_reflection=cfg.require_reflection)
    acc = accuracy_reward(resp, gold_answer)
    balance = 0.0
    if fmt == 1:
        balance = reflection_balance_reward(reflection_stats(resp), cfg.ideal_reflection_len)
    composite = cfg.w_format * fmt + cfg.w_accuracy * acc + cfg.w_balance * balance
    return RewardBreakdown(
        format=fmt,
        accuracy=acc,
        balance=balance,
        composite=composite,
        w_format=cfg.w_format,
        w_accuracy=cfg.w_accuracy,
        w_balance=cfg.w_balance,
    )
