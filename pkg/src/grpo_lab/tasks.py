"""Synthetic arithmetic tasks for the toy policy."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .policy import Prompt, Vocabulary

DIFFICULTIES = ("easy", "medium", "hard")

_EXPR = re.compile(r"^\s*(\d+)\s*\+\s*(\d+)(?:\s*\*\s*(\d+))?\s*=?\s*$")


@dataclass(frozen=True)
class TaskInstance:
    prompt: Prompt
    gold_answer: str
    difficulty: str


def evaluate_expression(expr: str) -> int:
    """Evaluate ``a+b`` or ``a+b*c`` with multiplication binding tighter."""
    m = _EXPR.match(expr)
    if m is None:
        raise ValueError(f"unsupported expression {expr!r}")
    a, b, c = m.groups()
    product = int(b) * int(c) if c is not None else int(b)
    return int(a) + product


def task_from_expression(vocab: Vocabulary, expr: str, difficulty: str = "easy", max_prompt_length: int = 32) -> TaskInstance:
    text = expr.strip().rstrip("=") + "="
    return TaskInstance(Prompt.from_text(vocab, text, max_prompt_length), str(evaluate_expression(text)), difficulty)


def gen_arithmetic_task(seed: int, difficulty: str, vocab: Vocabulary | None = None) -> TaskInstance:
    """easy: single-digit a+b; medium: two-digit a+b; hard: a+b*c over single digits."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    vocab = vocab or Vocabulary.default()
    rng = np.random.default_rng(seed)
    if difficulty == "easy":
        a, b = rng.integers(0, 10, size=2)
        expr = f"{a}+{b}"
    elif difficulty == "medium":
        a, b = rng.integers(10, 100, size=2)
        expr = f"{a}+{b}"
    else:
        a, b, c = rng.integers(0, 10, size=3)
        expr = f"{a}+{b}*{c}"
    return task_from_expression(vocab, expr, difficulty)


def gen_task_set(seed: int, n: int, difficulty: str = "easy", vocab: Vocabulary | None = None) -> list[TaskInstance]:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [gen_arithmetic_task(int(s), difficulty, vocab) for s in seeds]
