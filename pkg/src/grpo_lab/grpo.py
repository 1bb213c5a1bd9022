"""Group-relative policy optimization on the toy policy.

Token-level importance ratios, each completion's group-normalized advantage
broadcast to all of its tokens, and a KL penalty toward a frozen reference
averaged over every token in the group.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import (
    Completion,
    PolicyParams,
    Prompt,
    batch_logprobs_and_grad,
    sample_batch,
    sequence_contexts,
    token_logprobs,
)
from .rewards import RewardBreakdown, RewardConfig, composite_reward
from .tasks import TaskInstance

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


class NumericalAbort(RuntimeError):
    """A training step produced a non-finite gradient; parameters were not updated."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Hyperparams:
    group_size: int = 6
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    learning_rate: float = 1e-2
    min_lr_rate: float = 0.1
    warmup_ratio: float = 0.1
    max_steps: int = 500
    grad_accum: int = 4
    std_floor: float = 1e-8
    temperature: float = 0.7
    max_completion_length: int = 64
    optimizer: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be > 0")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass
class Group:
    prompt: Prompt
    completions: list[Completion]
    old_logprobs: list[np.ndarray]
    ref_logprobs: list[np.ndarray]
    rewards: np.ndarray
    advantages: np.ndarray
    breakdowns: list[RewardBreakdown] = field(default_factory=list)

    def check_alignment(self) -> None:
        n = len(self.completions)
        if not (len(self.old_logprobs) == len(self.ref_logprobs) == len(self.advantages) == n):
            raise ValueError("group fields disagree on the number of completions")
        for i, c in enumerate(self.completions):
            if len(self.old_logprobs[i]) != c.length or len(self.ref_logprobs[i]) != c.length:
                raise ValueError(f"logprobs of completion {i} do not align with its {c.length} tokens")

    @property
    def n_tokens(self) -> int:
        return sum(c.length for c in self.completions)


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_reward: float
    mean_accuracy_component: float
    mean_completion_length: float
    mean_kl: float
    objective_value: float
    grad_norm: float
    learning_rate: float = 0.0
    accuracy: float = 0.0
    format_rate: float = 0.0


def compute_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """Standardize rewards within the group using the sample (n - 1) std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    std = r.std(ddof=1)
    if std < std_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / max(std, std_floor)


def kl_value(ref_logprob_token, cur_logprob_token):
    """Per-token estimator rho - log(rho) - 1 with rho = pi_ref / pi_cur; always >= 0."""
    d = np.asarray(ref_logprob_token, dtype=np.float64) - np.asarray(cur_logprob_token, dtype=np.float64)
    out = np.expm1(d) - d
    return float(out) if out.ndim == 0 else out


def _flatten(group: Group, params: PolicyParams):
    contexts, targets, adv, old, ref = [], [], [], [], []
    for i, c in enumerate(group.completions):
        if c.length == 0:
            continue
        contexts.append(sequence_contexts(params, group.prompt.token_ids, c.token_ids))
        targets.append(np.asarray(c.token_ids))
        adv.append(np.full(c.length, group.advantages[i]))
        old.append(np.asarray(group.old_logprobs[i]))
        ref.append(np.asarray(group.ref_logprobs[i]))
    if not contexts:
        return None
    return tuple(np.concatenate(a) for a in (contexts, targets, adv, old, ref))


def _token_terms(cur, old, ref, adv, eps, beta):
    ratio = np.exp(cur - old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    kl = kl_value(ref, cur)
    # d(term)/d(cur): ratio * A where the unclipped branch is the minimum, else 0.
    active = unclipped <= clipped
    d_surrogate = np.where(active, unclipped, 0.0)
    d_kl = 1.0 - np.exp(ref - cur)
    n = len(cur)
    objective = surrogate.mean() - beta * np.atleast_1d(kl).mean()
    weights = (d_surrogate - beta * d_kl) / n
    return objective, weights, surrogate, kl


def surrogate_objective(group: Group, cur_params: PolicyParams, hyper: Hyperparams) -> float:
    group.check_alignment()
    flat = _flatten(group, cur_params)
    if flat is None:
        return 0.0
    contexts, targets, adv, old, ref = flat
    cur, _ = batch_logprobs_and_grad(cur_params, contexts, targets, lambda lp: np.zeros_like(lp), hyper.temperature)
    return float(_token_terms(cur, old, ref, adv, hyper.clip_eps, hyper.kl_beta)[0])


def objective_and_gradient(group: Group, cur_params: PolicyParams, hyper: Hyperparams) -> tuple[float, np.ndarray, float]:
    """Surrogate value, its gradient, and the token-mean KL to the reference."""
    group.check_alignment()
    flat = _flatten(group, cur_params)
    if flat is None:
        return 0.0, np.zeros(cur_params.param_count), 0.0
    contexts, targets, adv, old, ref = flat
    box = {}

    def weights(cur):
        box["obj"], w, _, box["kl"] = _token_terms(cur, old, ref, adv, hyper.clip_eps, hyper.kl_beta)
        return w

    _, grad = batch_logprobs_and_grad(cur_params, contexts, targets, weights, hyper.temperature)
    return float(box["obj"]), grad, float(np.mean(box["kl"]))


def objective_gradient(group: Group, cur_params: PolicyParams, hyper: Hyperparams) -> np.ndarray:
    return objective_and_gradient(group, cur_params, hyper)[1]


def lr_at(step: int, hyper: Hyperparams) -> float:
    """Linear warmup, then cosine decay down to ``min_lr_rate * learning_rate``."""
    if not 0 <= step <= hyper.max_steps:
        raise ValueError(f"step {step} outside 0..{hyper.max_steps}")
    warmup = math.ceil(hyper.warmup_ratio * hyper.max_steps)
    if step < warmup:
        return hyper.learning_rate * step / warmup
    decay_steps = hyper.max_steps - warmup
    progress = (step - warmup) / decay_steps if decay_steps > 0 else 1.0
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return hyper.learning_rate * (hyper.min_lr_rate + (1.0 - hyper.min_lr_rate) * cosine)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def apply_update(weights: np.ndarray, grad: np.ndarray, lr: float, hyper: Hyperparams, state: AdamState | None) -> np.ndarray:
    """One ascent step; plain gradient ascent unless an Adam state is supplied."""
    if hyper.optimizer == "sgd" or state is None:
        return weights + lr * grad
    b1, b2 = hyper.adam_betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    return weights + lr * m_hat / (np.sqrt(v_hat) + hyper.adam_eps)


def completion_seeds(seed: int, task_index: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, task_index]).generate_state(n, dtype=np.uint64)]


def build_groups(
    params: PolicyParams,
    ref_params: PolicyParams,
    tasks: Sequence[TaskInstance],
    hyper: Hyperparams,
    reward_cfg: RewardConfig,
    seed: int,
) -> list[Group]:
    G = hyper.group_size
    prompts = [t.prompt for t in tasks for _ in range(G)]
    seeds = [s for i in range(len(tasks)) for s in completion_seeds(seed, i, G)]
    completions = sample_batch(
        params, prompts, seeds, max_len=hyper.max_completion_length, temperature=hyper.temperature
    )
    vocab = params.vocab
    groups = []
    for i, task in enumerate(tasks):
        comps = completions[i * G:(i + 1) * G]
        breakdowns = [composite_reward(c, vocab.decode(c.token_ids), task.gold_answer, reward_cfg) for c in comps]
        rewards = np.array([b.total for b in breakdowns])
        groups.append(Group(
            prompt=task.prompt,
            completions=comps,
            old_logprobs=[np.asarray(c.per_token_logprob) for c in comps],
            ref_logprobs=[token_logprobs(ref_params, task.prompt, c, hyper.temperature) for c in comps],
            rewards=rewards,
            advantages=compute_advantages(rewards, hyper.std_floor),
            breakdowns=breakdowns,
        ))
    return groups


def train_step(
    params: PolicyParams,
    tasks: Sequence[TaskInstance],
    hyper: Hyperparams,
    reward_cfg: RewardConfig,
    seed: int,
    *,
    ref_params: PolicyParams | None = None,
    step: int = 0,
    optimizer: AdamState | None = None,
) -> tuple[PolicyParams, StepMetrics]:
    """Sample groups from ``params`` (the old policy), then take one ascent step.

    ``ref_params`` defaults to ``params``, which is only right on the first step;
    callers training for longer must pass the initial checkpoint.
    """
    if not tasks:
        raise ValueError("train_step needs a non-empty batch of tasks")
    ref_params = params if ref_params is None else ref_params
    old_params = params
    groups = build_groups(old_params, ref_params, tasks, hyper, reward_cfg, seed)

    # Fixed micro-batch order keeps the reduction deterministic.
    grad = np.zeros(params.param_count)
    objectives, kls, kl_weights = [], [], []
    for micro in np.array_split(np.arange(len(groups)), min(hyper.grad_accum, len(groups))):
        for gi in micro:
            obj, g, kl = objective_and_gradient(groups[gi], params, hyper)
            grad += g
            objectives.append(obj)
            kls.append(kl)
            kl_weights.append(groups[gi].n_tokens)
    grad /= len(groups)

    lr = lr_at(min(step, hyper.max_steps), hyper)
    grad_norm = float(np.linalg.norm(grad))
    if not np.isfinite(grad_norm):
        raise NumericalAbort(
            f"non-finite gradient at step {step}",
            {"step": step, "objectives": objectives, "nan_count": int(np.isnan(grad).sum())},
        )
    new_weights = apply_update(params.weights, grad, lr, hyper, optimizer)
    if not np.all(np.isfinite(new_weights)):
        raise NumericalAbort(f"non-finite weights after update at step {step}", {"step": step, "lr": lr})

    breakdowns = [b for g in groups for b in g.breakdowns]
    lengths = [c.length for g in groups for c in g.completions]
    metrics = StepMetrics(
        step=step,
        mean_reward=float(np.mean([b.total for b in breakdowns])),
        mean_accuracy_component=float(np.mean([b.accuracy_component for b in breakdowns])),
        mean_completion_length=float(np.mean(lengths)),
        mean_kl=float(np.average(kls, weights=kl_weights)) if sum(kl_weights) else 0.0,
        objective_value=float(np.mean(objectives)),
        grad_norm=grad_norm,
        learning_rate=lr,
        accuracy=float(np.mean([b.correct for b in breakdowns])),
        format_rate=float(np.mean([b.format_component for b in breakdowns])),
    )
    log.debug("step %d reward %.4f len %.2f kl %.5f", step, metrics.mean_reward, metrics.mean_completion_length, metrics.mean_kl)
    return params.replace_weights(new_weights), metrics
