"""Supervised warm start that turns a random policy into a usable base model.

A random toy policy almost never emits a well-formed boxed answer, so group
rewards would be constant and every advantage zero.  The warm start imitates
noisy demonstration traces of the shape

    <think> [filler letters] a+b </think> \\boxed{answer} } <eos>

where the answer is right only some of the time.  The result follows the
format, answers imperfectly, and leaves room for RL to improve accuracy and
trim the filler.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grpo import AdamState, Hyperparams, apply_update
from .policy import (
    BOX_CLOSE,
    BOX_OPEN,
    EOS,
    THINK_CLOSE,
    THINK_OPEN,
    PolicyParams,
    Vocabulary,
    batch_logprobs_and_grad,
    init_params,
    sequence_contexts,
)
from .tasks import DIFFICULTIES, TaskInstance, evaluate_expression, gen_task_set


@dataclass(frozen=True)
class WarmStartConfig:
    n_demos: int = 2000
    p_correct: float = 0.5
    max_filler: int = 6
    iterations: int = 300
    batch_tokens: int = 4096
    learning_rate: float = 1e-2
    context_window: int = 8
    embed_dim: int = 16
    hidden_dim: int = 64
    difficulties: tuple[str, ...] = ("easy",)


def demonstration(task: TaskInstance, vocab: Vocabulary, rng: np.random.Generator, cfg: WarmStartConfig) -> list[int]:
    expr = task.prompt.text.rstrip("=")
    gold = evaluate_expression(expr)
    if rng.random() < cfg.p_correct:
        answer = gold
    else:
        answer = int(rng.integers(0, max(2 * gold, 19)))
    filler = "".join(rng.choice(list(string.ascii_lowercase), size=int(rng.integers(0, cfg.max_filler + 1))))
    ids = [vocab.id(THINK_OPEN)] + vocab.encode(filler + expr) + [vocab.id(THINK_CLOSE), vocab.id(BOX_OPEN)]
    ids += vocab.encode(str(answer)) + [vocab.id(BOX_CLOSE), vocab.id(EOS)]
    return ids


def warm_start(seed: int, cfg: WarmStartConfig | None = None, vocab: Vocabulary | None = None) -> PolicyParams:
    """Deterministic for a fixed (seed, cfg)."""
    cfg = cfg or WarmStartConfig()
    vocab = vocab or Vocabulary.default()
    for d in cfg.difficulties:
        if d not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {d!r}")
    rng = np.random.default_rng([seed, 7])
    params = init_params(
        vocab,
        context_window=cfg.context_window,
        embed_dim=cfg.embed_dim,
        hidden_dim=cfg.hidden_dim,
        seed=int(rng.integers(2**31)),
    )
    per = -(-cfg.n_demos // len(cfg.difficulties))
    tasks = [t for k, d in enumerate(cfg.difficulties) for t in gen_task_set(seed * 31 + k, per, d, vocab)]
    contexts, targets = [], []
    for task in tasks:
        ids = demonstration(task, vocab, rng, cfg)
        contexts.append(sequence_contexts(params, task.prompt.token_ids, ids))
        targets.append(np.asarray(ids))
    contexts = np.concatenate(contexts)
    targets = np.concatenate(targets)
    return fit_tokens(params, contexts, targets, cfg, rng)


def fit_tokens(
    params: PolicyParams,
    contexts: np.ndarray,
    targets: np.ndarray,
    cfg: WarmStartConfig,
    rng: np.random.Generator,
) -> PolicyParams:
    """Maximize mean token log-likelihood with Adam on random minibatches."""
    hyper = Hyperparams(optimizer="adam", learning_rate=cfg.learning_rate)
    state = AdamState.zeros(params.param_count)
    weights = params.weights.copy()
    n = len(targets)
    for _ in range(cfg.iterations):
        idx = rng.choice(n, size=min(cfg.batch_tokens, n), replace=False)
        current = params.replace_weights(weights)
        _, grad = batch_logprobs_and_grad(
            current, contexts[idx], targets[idx], lambda lp: np.full(len(lp), 1.0 / len(lp))
        )
        weights = apply_update(weights, grad, cfg.learning_rate, hyper, state)
    return params.replace_weights(weights)


def mean_nll(params: PolicyParams, contexts: np.ndarray, targets: Sequence[int]) -> float:
    logp, _ = batch_logprobs_and_grad(params, contexts, np.asarray(targets), lambda lp: np.zeros_like(lp))
    return float(-logp.mean())
