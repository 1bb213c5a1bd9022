"""Dataset curation: boxed filter, difficulty filter, noise filter, and mixing.

Stages append one trace entry to every record they see, so a dataset carries
its own funnel history.  The model-based judges become small pluggable
objects with deterministic default implementations.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes
from .verifier import extract_boxed

SOURCES = ("s1", "deepscaler", "synthetic")
STAGES = ("boxed", "difficulty", "noise")
REQUIRED_KEYS = ("id", "question", "solution", "source")


class DataError(ValueError):
    """Malformed dataset input."""


@dataclass
class TraceEntry:
    stage: str
    status: str  # "kept" or "dropped"
    reason: str = ""


@dataclass
class ProblemRecord:
    id: str
    question: str
    solution: str
    gold_answer: str | None = None
    source: str = "synthetic"
    difficulty_score: float | None = None
    filter_trace: list[TraceEntry] = field(default_factory=list)

    def trace(self, stage: str, kept: bool, reason: str = "") -> None:
        self.filter_trace.append(TraceEntry(stage, "kept" if kept else "dropped", reason))

    def to_json(self) -> dict:
        doc = {
            "id": self.id,
            "question": self.question,
            "solution": self.solution,
            "answer": self.gold_answer,
            "source": self.source,
        }
        if self.difficulty_score is not None:
            doc["difficulty_score"] = self.difficulty_score
        if self.filter_trace:
            doc["filter_trace"] = [[t.stage, t.status, t.reason] for t in self.filter_trace]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ProblemRecord":
        return cls(
            id=str(doc["id"]),
            question=doc["question"],
            solution=doc["solution"],
            gold_answer=doc.get("answer"),
            source=doc["source"],
            difficulty_score=doc.get("difficulty_score"),
            filter_trace=[TraceEntry(*t) for t in doc.get("filter_trace", [])],
        )


# ---------------------------------------------------------------------------
# JSONL io
# ---------------------------------------------------------------------------

def load_jsonl(path: str | os.PathLike) -> list[ProblemRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(doc, dict):
                raise DataError(f"{path}: line {lineno}: expected a JSON object")
            for key in REQUIRED_KEYS:
                if key not in doc:
                    raise DataError(f"{path}: line {lineno}: missing required key {key!r}")
            rec = ProblemRecord.from_json(doc)
            if rec.id in seen:
                raise DataError(f"{path}: line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def save_jsonl(records: Iterable[ProblemRecord], path: str | os.PathLike) -> None:
    lines = [json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in records]
    atomic_write_bytes(path, "".join(lines).encode("utf-8"))


# ---------------------------------------------------------------------------
# Scorers and judges
# ---------------------------------------------------------------------------

class Scorer(Protocol):
    def score(self, record: ProblemRecord) -> float:
        """Estimated probability in [0, 1] that the reference solver gets it right."""
        ...


class HeuristicScorer:
    """Solve-rate guess that decays with question size.

    ``exp(-decay * (chars - 4))`` over non-space characters: a four-character
    prompt such as ``3+4=`` scores 1.0 and longer questions score lower.
    """

    def __init__(self, decay: float = 0.15):
        self.decay = decay

    def score(self, record: ProblemRecord) -> float:
        n = len("".join(record.question.split()))
        return float(min(1.0, math.exp(-self.decay * max(0, n - 4))))


class PolicyPassRateScorer:
    """Fraction of ``k`` sampled toy-policy attempts that the verifier accepts."""

    def __init__(self, params, *, k: int = 8, temperature: float = 0.7, max_len: int = 64, seed: int = 0):
        self.params = params
        self.k = k
        self.temperature = temperature
        self.max_len = max_len
        self.seed = seed

    def score(self, record: ProblemRecord) -> float:
        from .policy import Prompt, sample_batch
        from .rewards import accuracy_reward

        if record.gold_answer is None:
            raise DataError(f"record {record.id!r} has no gold answer to score against")
        prompt = Prompt.from_text(self.params.vocab, record.question)
        seeds = np.random.SeedSequence([self.seed, _stable_hash(record.id)]).generate_state(self.k, dtype=np.uint64)
        comps = sample_batch(
            self.params, [prompt] * self.k, [int(s) for s in seeds], max_len=self.max_len, temperature=self.temperature
        )
        vocab = self.params.vocab
        return sum(accuracy_reward(vocab.decode(c.token_ids), record.gold_answer) for c in comps) / self.k


def _stable_hash(text: str) -> int:
    h = 2166136261
    for byte in text.encode():
        h = ((h ^ byte) * 16777619) & 0xFFFFFFFF
    return h


def braces_balanced(text: str) -> bool:
    depth = 0
    for ch in text:
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def default_noise_judge(record: ProblemRecord) -> str:
    if not record.question.strip():
        return "noisy"
    if record.question.count("?") > 1:
        return "multipart"
    if not braces_balanced(record.solution):
        return "noisy"
    return "clean"


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def filter_boxed(records: Sequence[ProblemRecord]) -> list[ProblemRecord]:
    kept = []
    for rec in records:
        ok = extract_boxed(rec.solution) is not None
        rec.trace("boxed", ok, "" if ok else "no-boxed")
        if ok:
            kept.append(rec)
    return kept


def filter_difficulty(records: Sequence[ProblemRecord], scorer: Scorer, drop_above: float = 0.9) -> list[ProblemRecord]:
    """Drop questions the scorer deems too easy (score > ``drop_above``)."""
    if not 0.0 <= drop_above <= 1.0:
        raise ValueError("drop_above must lie in [0, 1]")
    kept = []
    for rec in records:
        try:
            s = float(scorer.score(rec))
        except Exception as exc:  # noqa: BLE001 - any scorer failure keeps the record
            rec.difficulty_score = None
            rec.trace("difficulty", True, f"score-error: {exc}")
            kept.append(rec)
            continue
        rec.difficulty_score = s
        if s > drop_above:
            rec.trace("difficulty", False, "trivial")
        else:
            rec.trace("difficulty", True)
            kept.append(rec)
    return kept


def filter_noise(
    records: Sequence[ProblemRecord], judge: Callable[[ProblemRecord], str] = default_noise_judge
) -> list[ProblemRecord]:
    kept = []
    for rec in records:
        verdict = judge(rec)
        if verdict not in ("clean", "noisy", "multipart"):
            raise ValueError(f"judge returned unknown verdict {verdict!r}")
        ok = verdict == "clean"
        rec.trace("noise", ok, "" if ok else verdict)
        if ok:
            kept.append(rec)
    return kept


@dataclass
class PipelineResult:
    kept: list[ProblemRecord]
    records: list[ProblemRecord]
    counts: list[tuple[str, int]]


def run_pipeline(
    records: Sequence[ProblemRecord],
    stages: Sequence[str] = STAGES,
    *,
    scorer: Scorer | None = None,
    drop_above: float = 0.9,
    judge: Callable[[ProblemRecord], str] = default_noise_judge,
) -> PipelineResult:
    """Run the named stages in order.

    Records dropped upstream still get a ``dropped-upstream`` entry for every
    later stage, so each input ends with exactly one entry per executed stage.
    """
    for s in stages:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
    scorer = scorer or HeuristicScorer()
    current = list(records)
    counts = [("input", len(current))]
    for stage in stages:
        alive = {id(r) for r in current}
        if stage == "boxed":
            out = filter_boxed(current)
        elif stage == "difficulty":
            out = filter_difficulty(current, scorer, drop_above)
        else:
            out = filter_noise(current, judge)
        for rec in records:
            if id(rec) not in alive:
                rec.trace(stage, False, "dropped-upstream")
        current = out
        counts.append((stage, len(current)))
    return PipelineResult(current, list(records), counts)


def mix_datasets(
    open_s1: Sequence[ProblemRecord],
    open_deepscaler: Sequence[ProblemRecord],
    easy_pool: Sequence[ProblemRecord],
    counts: tuple[int, int, int],
    seed: int,
) -> list[ProblemRecord]:
    """Sample each pool without replacement, concatenate, shuffle by seed.

    Returns copies; traces added later do not leak back into the pools.
    """
    pools = (("open_s1", open_s1), ("open_deepscaler", open_deepscaler), ("easy_pool", easy_pool))
    rng = np.random.default_rng(seed)
    mixed = []
    for (name, pool), n in zip(pools, counts):
        if n < 0:
            raise ValueError(f"negative count for {name}")
        if len(pool) < n:
            raise DataError(f"pool {name} has {len(pool)} records, {n} requested")
        idx = np.sort(rng.choice(len(pool), size=n, replace=False))
        mixed.extend(copy.deepcopy(pool[i]) for i in idx)
    order = rng.permutation(len(mixed))
    return [mixed[i] for i in order]


def read_counts(text: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3 or not all(p.lstrip("-").isdigit() for p in parts):
        raise ValueError(f"expected three comma-separated integers, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def write_jsonl(path: str | os.PathLike, docs: Iterable[dict]) -> None:
    atomic_write_bytes(path, "".join(json.dumps(d) + "\n" for d in docs).encode())


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
    return out
