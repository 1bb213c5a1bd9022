"""Rule-based rewards: binary accuracy, cosine length-scaled accuracy, and format."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .policy import Completion
from .verifier import answers_equivalent, check_format, extract_boxed

ANSWER_MODES = ("accuracy", "cosine")


@dataclass(frozen=True)
class RewardConfig:
    weight_format: float = 1.0
    weight_answer: float = 2.0
    answer_mode: str = "accuracy"
    r_correct_short: float = 1.0
    r_correct_long: float = 0.5
    r_wrong_short: float = -0.5
    r_wrong_long: float = 0.0
    max_len: int = 64
    # False relaxes the format reward to "tags present" only.
    require_answer_after_think: bool = True

    def __post_init__(self) -> None:
        if self.answer_mode not in ANSWER_MODES:
            raise ValueError(f"answer_mode must be one of {ANSWER_MODES}, got {self.answer_mode!r}")
        if not self.r_correct_long < self.r_correct_short:
            raise ValueError("need r_correct_long < r_correct_short")
        if not self.r_wrong_short < self.r_wrong_long <= 0 <= self.r_correct_long:
            raise ValueError("need r_wrong_short < r_wrong_long <= 0 <= r_correct_long")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.weight_format < 0 or self.weight_answer < 0:
            raise ValueError("reward weights must be non-negative")

    @property
    def bounds(self) -> tuple[float, float]:
        low = self.weight_answer * min(self.r_wrong_short, 0.0)
        high = self.weight_answer * max(self.r_correct_short, 1.0) + self.weight_format
        return low, high


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy_component: float
    format_component: float
    total: float
    correct: bool
    length_fraction: float


def accuracy_reward(completion_text: str, gold: str) -> float:
    extracted = extract_boxed(completion_text)
    if extracted is None:
        return 0.0
    return 1.0 if answers_equivalent(extracted, gold) else 0.0


def cosine_reward(correct: bool, gen_len: int, config: RewardConfig) -> float:
    """Interpolate between the short and long endpoints with 0.5 * (1 + cos(pi * t))."""
    if not 0 <= gen_len <= config.max_len:
        raise ValueError(f"gen_len {gen_len} outside 0..{config.max_len}; truncate first")
    t = gen_len / config.max_len
    rho = 0.5 * (1.0 + math.cos(math.pi * t))
    if correct:
        return config.r_correct_long + (config.r_correct_short - config.r_correct_long) * rho
    return config.r_wrong_long + (config.r_wrong_short - config.r_wrong_long) * rho


def format_reward(completion_text: str, *, require_answer_after_think: bool = True) -> float:
    verdict = check_format(completion_text)
    ok = verdict.has_think_block and (verdict.answer_after_think or not require_answer_after_think)
    return 1.0 if ok else 0.0


def composite_reward(completion: Completion, text: str, gold: str, config: RewardConfig) -> RewardBreakdown:
    correct = accuracy_reward(text, gold) == 1.0
    if config.answer_mode == "cosine":
        answer = cosine_reward(correct, completion.length, config)
    else:
        answer = 1.0 if correct else 0.0
    fmt = format_reward(text, require_answer_after_think=config.require_answer_after_think)
    return RewardBreakdown(
        accuracy_component=answer,
        format_component=fmt,
        total=config.weight_answer * answer + config.weight_format * fmt,
        correct=correct,
        length_fraction=min(completion.length / config.max_len, 1.0),
    )
