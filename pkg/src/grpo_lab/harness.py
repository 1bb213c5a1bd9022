"""Run configuration and the train / eval / report drivers behind the CLI."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import checkpoint
from .checkpoint import atomic_write_bytes
from .curation import DataError, ProblemRecord, load_jsonl
from .grpo import AdamState, Hyperparams, NumericalAbort, StepMetrics, completion_seeds, train_step
from .policy import PolicyParams, Prompt, Vocabulary, VocabularyError, sample_batch
from .rewards import RewardConfig, accuracy_reward
from .tasks import DIFFICULTIES, TaskInstance, evaluate_expression, gen_task_set
from .verifier import extract_boxed
from .warmstart import WarmStartConfig, warm_start

log = logging.getLogger(__name__)

ENGLISH_ONLY = "Reply in English only, do not use other languages"

# Each preset pins (answer_mode, max_completion_length); toy presets also pick
# settings under which a desk-scale run learns within a few hundred steps.
PRESETS: dict[str, dict[str, Any]] = {
    "exp1": {"answer_mode": "accuracy", "max_completion_length": 4096,
             "learning_rate": 1e-6, "max_steps": 500, "max_prompt_length": 512},
    "exp2": {"answer_mode": "accuracy", "max_completion_length": 3584,
             "learning_rate": 1e-6, "max_steps": 500, "max_prompt_length": 512},
    "exp3": {"answer_mode": "cosine", "max_completion_length": 3584,
             "learning_rate": 1e-6, "max_steps": 500, "max_prompt_length": 512,
             "system_prompt": ENGLISH_ONLY},
    "exp1-toy": {"answer_mode": "accuracy", "max_completion_length": 64, "optimizer": "adam", "max_steps": 200},
    "exp2-toy": {"answer_mode": "accuracy", "max_completion_length": 56, "optimizer": "adam", "max_steps": 200},
    "exp3-toy": {"answer_mode": "cosine", "max_completion_length": 56, "optimizer": "adam", "max_steps": 200,
                 "system_prompt": ENGLISH_ONLY},
}

# Config-file key (trainer-style names) -> RunConfig field.
KEY_ALIASES = {
    "num_generations": "group_size",
    "gradient_accumulation_steps": "grad_accum",
    "save_steps": "save_every",
    "beta": "kl_beta",
    "epsilon": "clip_eps",
    "num_train_epochs": "num_epochs",
    "output_dir": "checkpoint_dir",
}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str | None = None
    # Hyperparams
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
    # RewardConfig
    answer_mode: str = "accuracy"
    weight_format: float = 1.0
    weight_answer: float = 2.0
    r_correct_short: float = 1.0
    r_correct_long: float = 0.5
    r_wrong_short: float = -0.5
    r_wrong_long: float = 0.0
    require_answer_after_think: bool = True
    # run
    dataset: str = "synthetic:easy"
    vocab_path: str | None = None
    checkpoint_dir: str = "runs/default"
    init_checkpoint: str | None = None
    save_every: int = 50
    seed: int = 42
    prompts_per_step: int = 8
    num_epochs: int = 1
    max_prompt_length: int = 32
    system_prompt: str = ""
    # base-model warm start, used when no init_checkpoint is given
    warmstart_p_correct: float = 0.7
    warmstart_iterations: int = 300
    warmstart_demos: int = 2000

    @property
    def hyper(self) -> Hyperparams:
        return Hyperparams(
            group_size=self.group_size,
            clip_eps=self.clip_eps,
            kl_beta=self.kl_beta,
            learning_rate=self.learning_rate,
            min_lr_rate=self.min_lr_rate,
            warmup_ratio=self.warmup_ratio,
            max_steps=self.max_steps,
            grad_accum=self.grad_accum,
            std_floor=self.std_floor,
            temperature=self.temperature,
            max_completion_length=self.max_completion_length,
            optimizer=self.optimizer,
        )

    @property
    def rewards(self) -> RewardConfig:
        return RewardConfig(
            weight_format=self.weight_format,
            weight_answer=self.weight_answer,
            answer_mode=self.answer_mode,
            r_correct_short=self.r_correct_short,
            r_correct_long=self.r_correct_long,
            r_wrong_short=self.r_wrong_short,
            r_wrong_long=self.r_wrong_long,
            max_len=self.max_completion_length,
            require_answer_after_think=self.require_answer_after_think,
        )

    def validate(self) -> "RunConfig":
        try:
            self.hyper
            self.rewards
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.save_every < 1 or self.prompts_per_step < 1 or self.max_steps < 0:
            raise ConfigError("save_every and prompts_per_step must be >= 1, max_steps >= 0")
        return self

    def to_json(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: Any) -> Any:
    kind = str(_FIELD_TYPES[name])
    if not isinstance(raw, str):
        return raw
    value = raw.strip().strip('"').strip("'")
    if "None" in kind and value.lower() in ("", "none", "null"):
        return None
    try:
        if kind.startswith("int"):
            return int(float(value)) if "e" in value.lower() else int(value)
        if kind.startswith("float"):
            return float(value)
        if kind.startswith("bool"):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return value


def _expand_key(key: str, value: str) -> dict[str, str]:
    """Map one config-file entry onto RunConfig fields."""
    if key == "reward_weights":
        parts = [p.strip() for p in value.split(",")]
        if len(parts) != 2:
            raise ConfigError("reward_weights takes two values: format, answer")
        return {"weight_format": parts[0], "weight_answer": parts[1]}
    if key == "reward_funcs":
        funcs = [p.strip().lower() for p in value.replace("(", ",").replace(")", "").split(",") if p.strip()]
        unknown = set(funcs) - {"format", "accuracy", "cosine"}
        if unknown:
            raise ConfigError(f"unknown reward_funcs {sorted(unknown)}")
        return {"answer_mode": "cosine" if "cosine" in funcs else "accuracy"}
    if key == "lr_scheduler_type":
        if value.strip() != "cosine_with_min_lr":
            raise ConfigError(f"only cosine_with_min_lr is supported, got {value!r}")
        return {}
    if key == "lr_scheduler_kwargs":
        k, _, v = value.partition(":")
        if k.strip() != "min_lr_rate":
            raise ConfigError(f"unsupported lr_scheduler_kwargs {value!r}")
        return {"min_lr_rate": v}
    if key == "max_len":
        return {"max_completion_length": value}
    name = KEY_ALIASES.get(key, key)
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    return {name: value}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key: value`` lines with an optional ``[rewards]`` section."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=(":", "="))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    out: dict[str, str] = {}
    for section in parser.sections():
        if section not in ("run", "rewards"):
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            out.update(_expand_key(key, value))
    return out


def build_config(file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Preset first, then config-file values, then explicit overrides."""
    merged: dict[str, Any] = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    preset = merged.get("preset")
    values: dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        values.update(PRESETS[preset])
    values.update(merged)
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()}).validate()


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    file_values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc.strerror}") from None
        file_values = parse_config_text(text)
    return build_config(file_values, overrides)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def load_vocab(path: str | None) -> Vocabulary:
    if path is None:
        return Vocabulary.default()
    try:
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read vocabulary {path}: {exc}") from None
    return Vocabulary(tuple(tokens))


def record_to_task(rec: ProblemRecord, vocab: Vocabulary, max_prompt_length: int) -> TaskInstance:
    question = rec.question.strip()
    if not question.endswith("="):
        question += "="
    prompt = Prompt.from_text(vocab, question, max_prompt_length)
    gold = rec.gold_answer if rec.gold_answer is not None else extract_boxed(rec.solution)
    if gold is None:
        raise DataError(f"record {rec.id!r} has neither an answer nor a boxed solution")
    return TaskInstance(prompt, gold, "easy")


def load_tasks(config: RunConfig, vocab: Vocabulary) -> list[TaskInstance]:
    spec = config.dataset
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        difficulty = parts[1] if len(parts) > 1 else "easy"
        if difficulty not in DIFFICULTIES:
            raise DataError(f"unknown synthetic difficulty {difficulty!r}")
        n = int(parts[2]) if len(parts) > 2 else max(config.max_steps, 1) * config.prompts_per_step
        return gen_task_set(config.seed, n, difficulty, vocab)
    try:
        records = load_jsonl(spec)
    except OSError as exc:
        raise DataError(f"cannot read dataset {spec}: {exc.strerror}") from None
    try:
        return [record_to_task(r, vocab, config.max_prompt_length) for r in records]
    except (VocabularyError, ValueError) as exc:
        raise DataError(str(exc)) from None


def synthetic_records(seed: int, n: int, difficulty: str = "easy", prefix: str = "task") -> list[ProblemRecord]:
    out = []
    for i, t in enumerate(gen_task_set(seed, n, difficulty)):
        expr = t.prompt.text.rstrip("=")
        out.append(ProblemRecord(
            id=f"{prefix}-{i:05d}",
            question=t.prompt.text,
            solution=f"{expr}={evaluate_expression(expr)} so \\boxed{{{t.gold_answer}}}",
            gold_answer=t.gold_answer,
            source="synthetic",
        ))
    return out


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def checkpoint_name(step: int) -> str:
    return f"checkpoint-{step:06d}.bin"


def initial_params(config: RunConfig, vocab: Vocabulary) -> PolicyParams:
    if config.init_checkpoint:
        try:
            return checkpoint.load(config.init_checkpoint)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load init checkpoint: {exc}") from None
    ws = WarmStartConfig(
        n_demos=config.warmstart_demos,
        p_correct=config.warmstart_p_correct,
        iterations=config.warmstart_iterations,
    )
    return warm_start(config.seed, ws, vocab)


def metrics_line(m: StepMetrics) -> str:
    return json.dumps(asdict(m), sort_keys=True) + "\n"


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 1]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class TrainResult:
    params: PolicyParams
    ref_params: PolicyParams
    metrics: list[StepMetrics]
    checkpoints: list[Path]
    steps_run: int
    aborted: NumericalAbort | None = None


def cmd_train(config: RunConfig, *, params: PolicyParams | None = None) -> TrainResult:
    """Run GRPO for ``max_steps`` or one pass over the data, whichever ends first.

    Writes ``checkpoint-000000.bin`` (the frozen reference) before the first
    step, then every ``save_every`` steps and at the end; ``metrics.jsonl`` gets
    one line per step.  A numerical abort stops the run, keeps every checkpoint
    already written and saves the last good parameters.
    """
    vocab = load_vocab(config.vocab_path)
    tasks = load_tasks(config, vocab)
    if not tasks:
        raise DataError("dataset is empty")
    out = Path(config.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "run_config.json", (json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n").encode())

    rng = np.random.default_rng([config.seed, 2])
    order = rng.permutation(len(tasks))
    tasks = [tasks[i] for i in order]
    B = config.prompts_per_step
    epoch_steps = config.num_epochs * (len(tasks) // B) if len(tasks) >= B else 1
    n_steps = min(config.max_steps, epoch_steps)

    ref = params if params is not None else initial_params(config, vocab)
    current = ref
    hyper = config.hyper
    reward_cfg = config.rewards
    opt = AdamState.zeros(ref.param_count) if hyper.optimizer == "adam" else None
    checkpoint.save(ref, out / checkpoint_name(0))
    saved = [out / checkpoint_name(0)]
    metrics: list[StepMetrics] = []
    metrics_path = out / "metrics.jsonl"
    aborted = None
    with open(metrics_path, "w", encoding="utf-8") as log_fh:
        for step in range(n_steps):
            start = (step * B) % len(tasks)
            batch = [tasks[(start + k) % len(tasks)] for k in range(B)]
            try:
                current, m = train_step(
                    current, batch, hyper, reward_cfg, step_seed(config.seed, step),
                    ref_params=ref, step=step, optimizer=opt,
                )
            except NumericalAbort as exc:
                log.error("numerical abort at step %d: %s", step, exc.diagnostics)
                aborted = exc
                break
            metrics.append(m)
            log_fh.write(metrics_line(m))
            log_fh.flush()
            done = step + 1
            if done % config.save_every == 0 or done == n_steps:
                checkpoint.save(current, out / checkpoint_name(done))
                saved.append(out / checkpoint_name(done))
    if aborted is not None and metrics and out / checkpoint_name(len(metrics)) not in saved:
        checkpoint.save(current, out / checkpoint_name(len(metrics)))
        saved.append(out / checkpoint_name(len(metrics)))
    return TrainResult(current, ref, metrics, saved, len(metrics), aborted)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    benchmark: str
    n_problems: int
    n_correct: int
    pass_at_1: float
    verdicts: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


class ParamsPolicy:
    """Adapter giving :class:`PolicyParams` the ``generate`` interface eval expects."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self.vocab = params.vocab

    def generate(self, prompts: Sequence[str], seeds: Sequence[int], *, max_len: int, temperature: float) -> list[str]:
        encoded = [Prompt.from_text(self.vocab, p, max_length=10**6) for p in prompts]
        comps = sample_batch(self.params, encoded, seeds, max_len=max_len, temperature=temperature)
        return [self.vocab.decode(c.token_ids) for c in comps]

    def can_encode(self, text: str) -> bool:
        try:
            self.vocab.encode(text)
        except VocabularyError:
            return False
        return True


def evaluate(
    policy,
    records: Sequence[ProblemRecord],
    *,
    benchmark: str = "benchmark",
    seed: int = 42,
    temperature: float = 0.7,
    max_len: int = 64,
) -> EvalReport:
    """Zero-shot pass@1: one sampled attempt per problem, graded by the accuracy reward."""
    skipped, usable = [], []
    for rec in records:
        question = rec.question.strip()
        if not question.endswith("="):
            question += "="
        if rec.gold_answer is None or not str(rec.gold_answer).strip():
            skipped.append({"id": rec.id, "reason": "missing gold answer"})
        elif hasattr(policy, "can_encode") and not policy.can_encode(question):
            skipped.append({"id": rec.id, "reason": "question not encodable"})
        else:
            usable.append((rec, question))
    if not usable:
        raise DataError("benchmark has no gradable problems")
    seeds = [completion_seeds(seed, i, 1)[0] for i in range(len(usable))]
    texts = policy.generate([q for _, q in usable], seeds, max_len=max_len, temperature=temperature)
    verdicts = []
    for (rec, _), text in zip(usable, texts):
        ok = accuracy_reward(text, rec.gold_answer) == 1.0
        verdicts.append({"id": rec.id, "extracted": extract_boxed(text), "gold": rec.gold_answer, "correct": int(ok)})
    n_correct = sum(v["correct"] for v in verdicts)
    return EvalReport(benchmark, len(verdicts), n_correct, n_correct / len(verdicts), verdicts, skipped)


def cmd_eval(
    checkpoint_path: str | os.PathLike | PolicyParams,
    records: Sequence[ProblemRecord],
    seed: int = 42,
    *,
    benchmark: str = "benchmark",
    temperature: float = 0.7,
    max_len: int = 64,
    out: str | os.PathLike | None = None,
) -> EvalReport:
    if isinstance(checkpoint_path, PolicyParams):
        params = checkpoint_path
    else:
        try:
            params = checkpoint.load(checkpoint_path)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load checkpoint {checkpoint_path}: {exc}") from None
    report = evaluate(
        ParamsPolicy(params), records, benchmark=benchmark, seed=seed, temperature=temperature, max_len=max_len
    )
    if out is not None:
        atomic_write_bytes(out, (json.dumps(report.to_json(), indent=2) + "\n").encode())
    return report


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("step", "mean_reward", "mean_len", "mean_kl", "objective", "grad_norm")
STEP_NOTE = "steps are optimizer updates of a single worker, so global and local steps coincide"


def read_metrics(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
    return rows


def detect_collapse(rewards: Sequence[float]) -> bool:
    """Final-decile mean below half of the best decile mean."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 10:
        return False
    means = [chunk.mean() for chunk in np.array_split(r, 10)]
    peak = max(means)
    return bool(peak > 0 and means[-1] < 0.5 * peak)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([
            r["step"], r["mean_reward"], r["mean_completion_length"], r["mean_kl"], r["objective_value"], r["grad_norm"],
        ])
    return buf.getvalue()


def cmd_report(metrics_path: str | os.PathLike, csv_path: str | os.PathLike | None = None) -> dict:
    rows = read_metrics(metrics_path)
    if not rows:
        raise DataError(f"{metrics_path}: metrics log is empty")
    summary: dict[str, Any] = {"steps": len(rows), "note": STEP_NOTE}
    for key in ("mean_reward", "mean_completion_length", "mean_kl"):
        series = [float(r[key]) for r in rows]
        summary[key] = {"min": min(series), "max": max(series), "final": series[-1]}
    summary["reward_collapse"] = detect_collapse([float(r["mean_reward"]) for r in rows])
    if csv_path is not None:
        atomic_write_bytes(csv_path, metrics_csv(rows).encode())
    return summary


def run_summary(metrics: Sequence[StepMetrics], window: int = 20) -> dict:
    r = [m.mean_reward for m in metrics]
    lengths = [m.mean_completion_length for m in metrics]
    return {
        "first_reward": float(np.mean(r[:window])),
        "last_reward": float(np.mean(r[-window:])),
        "first_len": float(np.mean(lengths[:window])),
        "last_len": float(np.mean(lengths[-window:])),
    }


def with_overrides(config: RunConfig, **changes: Any) -> RunConfig:
    return replace(config, **changes).validate()
