import json

import numpy as np
import pytest

from conftest import DATA, random_params
from grpo_lab import checkpoint
from grpo_lab.cli import main
from grpo_lab.curation import DataError, ProblemRecord, load_jsonl
from grpo_lab.harness import (
    CSV_COLUMNS,
    ENGLISH_ONLY,
    ConfigError,
    build_config,
    cmd_eval,
    cmd_report,
    cmd_train,
    detect_collapse,
    evaluate,
    load_config,
    parse_config_text,
    synthetic_records,
)
from grpo_lab.tasks import evaluate_expression


def tiny_config(tmp_path, name="run", **changes):
    """Fast run settings: a random tiny init checkpoint and short completions."""
    init = tmp_path / "init.bin"
    if not init.exists():
        checkpoint.save(random_params(3, scale=0.3), init)
    base = dict(
        checkpoint_dir=str(tmp_path / name), init_checkpoint=str(init), group_size=2, prompts_per_step=2,
        grad_accum=1, max_completion_length=8, max_steps=4, save_every=50, learning_rate=0.05,
    )
    base.update(changes)
    return build_config(overrides=base)


class TestConfig:
    def test_trainer_style_keys(self):
        text = "\n".join([
            "num_generations: 6",
            "max_completion_length: 3584",
            "beta: 0.04",
            "epsilon = 0.2",
            "gradient_accumulation_steps: 4",
            "save_steps: 50",
            "lr_scheduler_type: cosine_with_min_lr",
            "lr_scheduler_kwargs: min_lr_rate: 0.1",
            "reward_weights: 1.0, 2.0",
            "reward_funcs: format, cosine",
        ])
        cfg = build_config(parse_config_text(text))
        assert (cfg.group_size, cfg.max_completion_length, cfg.kl_beta, cfg.clip_eps) == (6, 3584, 0.04, 0.2)
        assert (cfg.grad_accum, cfg.save_every, cfg.min_lr_rate) == (4, 50, 0.1)
        assert (cfg.weight_format, cfg.weight_answer, cfg.answer_mode) == (1.0, 2.0, "cosine")
        assert cfg.rewards.max_len == 3584

    def test_rewards_section(self):
        cfg = build_config(parse_config_text("seed: 7\n[rewards]\nanswer_mode: cosine\nweight_answer: 3\n"))
        assert (cfg.seed, cfg.answer_mode, cfg.weight_answer) == (7, "cosine", 3.0)

    @pytest.mark.parametrize("text", [
        "nonsense_key: 1",
        "num_generations: many",
        "lr_scheduler_type: linear",
        "reward_funcs: tone",
        "reward_weights: 1",
        "[other]\nseed: 1",
        "num_generations: 1",
    ])
    def test_bad_config(self, text):
        with pytest.raises(ConfigError):
            build_config(parse_config_text(text))

    def test_override_order(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("max_steps: 30\nseed: 5\n")
        cfg = load_config(path, {"preset": "exp3", "seed": 9})
        assert (cfg.max_steps, cfg.seed, cfg.answer_mode) == (30, 9, "cosine")

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(DataError):
            load_config(tmp_path / "absent.txt")


class TestPresets:
    @pytest.mark.parametrize("preset,expected", [
        ("exp1", ("accuracy", 4096)),
        ("exp2", ("accuracy", 3584)),
        ("exp3", ("cosine", 3584)),
    ])
    def test_fidelity(self, preset, expected):
        cfg = build_config(overrides={"preset": preset})
        assert (cfg.rewards.answer_mode, cfg.rewards.max_len) == expected
        assert cfg.hyper.max_completion_length == expected[1]

    def test_exp3_system_prompt(self):
        assert build_config(overrides={"preset": "exp3"}).system_prompt == ENGLISH_ONLY
        assert build_config(overrides={"preset": "exp2"}).system_prompt == ""

    def test_trainer_defaults(self):
        cfg = build_config()
        assert (cfg.save_every, cfg.seed, cfg.group_size, cfg.grad_accum) == (50, 42, 6, 4)
        assert (cfg.weight_format, cfg.weight_answer) == (1.0, 2.0)

    def test_fields_overridable(self):
        cfg = build_config(overrides={"preset": "exp1", "max_completion_length": 99})
        assert cfg.max_completion_length == 99

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            build_config(overrides={"preset": "exp9"})


class TestTrain:
    def test_zero_steps(self, tmp_path):
        cfg = tiny_config(tmp_path, max_steps=0)
        res = cmd_train(cfg)
        out = tmp_path / "run"
        assert sorted(p.name for p in out.glob("checkpoint-*")) == ["checkpoint-000000.bin"]
        assert (out / "metrics.jsonl").read_text() == ""
        assert res.steps_run == 0

    def test_checkpoint_schedule(self, tmp_path):
        cfg = tiny_config(tmp_path, max_steps=120, save_every=50)
        cmd_train(cfg)
        names = sorted(p.name for p in (tmp_path / "run").glob("checkpoint-*"))
        assert names == [f"checkpoint-{s:06d}.bin" for s in (0, 50, 100, 120)]
        assert len((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()) == 120

    def test_epoch_cap(self, tmp_path):
        # 6 tasks, 2 per step, one epoch -> 3 steps even though max_steps is 10
        cfg = tiny_config(tmp_path, max_steps=10, dataset="synthetic:easy:6")
        assert cmd_train(cfg).steps_run == 3

    def test_reference_is_initial_checkpoint(self, tmp_path):
        cfg = tiny_config(tmp_path)
        res = cmd_train(cfg)
        out = tmp_path / "run"
        assert (out / "checkpoint-000000.bin").read_bytes() == (tmp_path / "init.bin").read_bytes()
        assert checkpoint.load(out / "checkpoint-000000.bin") == res.ref_params
        assert checkpoint.load(out / "checkpoint-000004.bin") == res.params

    def test_byte_identical_rerun(self, tmp_path):
        a = cmd_train(tiny_config(tmp_path, "a", max_steps=6))
        b = cmd_train(tiny_config(tmp_path, "b", max_steps=6))
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert (tmp_path / "a" / "checkpoint-000006.bin").read_bytes() == (tmp_path / "b" / "checkpoint-000006.bin").read_bytes()
        assert a.steps_run == b.steps_run == 6

    def test_jsonl_dataset(self, tmp_path):
        path = tmp_path / "train.jsonl"
        path.write_text("".join(json.dumps(r.to_json()) + "\n" for r in synthetic_records(1, 8)))
        res = cmd_train(tiny_config(tmp_path, dataset=str(path), max_steps=2))
        assert res.steps_run == 2

    def test_unreadable_dataset(self, tmp_path):
        with pytest.raises(DataError):
            cmd_train(tiny_config(tmp_path, dataset=str(tmp_path / "missing.jsonl")))


class StubPolicy:
    """Replies with a boxed answer looked up by question text."""

    def __init__(self, answers):
        self.answers = answers

    def generate(self, prompts, seeds, *, max_len, temperature):
        return [f"<think>x</think>\\boxed{{{self.answers[p]}}}" for p in prompts]


def records_for(n, seed=0):
    return [ProblemRecord(id=f"q{i}", question=f"{i}+{seed}=", solution="", gold_answer=str(i + seed)) for i in range(n)]


class TestEval:
    def test_empty_benchmark(self):
        with pytest.raises(DataError):
            evaluate(StubPolicy({}), [])

    def test_forty_with_thirty_two(self):
        recs = records_for(40)
        answers = {r.question: (r.gold_answer if i < 32 else "-1") for i, r in enumerate(recs)}
        rep = evaluate(StubPolicy(answers), recs)
        assert (rep.n_problems, rep.n_correct) == (40, 32)
        assert rep.pass_at_1 == pytest.approx(0.80, abs=1e-12)

    def test_lookup_table_policy_single_digit(self):
        recs = synthetic_records(5, 100)
        table = {r.question: str(evaluate_expression(r.question.rstrip("="))) for r in recs}
        rep = evaluate(StubPolicy(table), recs)
        assert rep.pass_at_1 == 1.0
        assert rep.pass_at_1 == rep.n_correct / rep.n_problems

    def test_missing_gold_skipped(self):
        recs = records_for(3)
        recs.append(ProblemRecord(id="nogold", question="1+1=", solution=""))
        rep = evaluate(StubPolicy({r.question: r.gold_answer for r in recs[:3]}), recs)
        assert rep.n_problems == 3
        assert rep.skipped == [{"id": "nogold", "reason": "missing gold answer"}]

    def test_reload_matches_in_memory(self, tmp_path):
        params = random_params(11, scale=0.4)
        path = tmp_path / "p.bin"
        checkpoint.save(params, path)
        recs = synthetic_records(2, 30)
        a = cmd_eval(params, recs, seed=4, max_len=12)
        b = cmd_eval(path, recs, seed=4, max_len=12, out=tmp_path / "r.json")
        assert a.verdicts == b.verdicts
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["n_problems"] == 30 and doc["pass_at_1"] == b.pass_at_1

    def test_eval_deterministic(self):
        params = random_params(12, scale=0.4)
        recs = synthetic_records(3, 20)
        assert cmd_eval(params, recs, seed=1, max_len=10) == cmd_eval(params, recs, seed=1, max_len=10)


def write_metrics(path, rewards):
    with open(path, "w") as fh:
        for i, r in enumerate(rewards):
            fh.write(json.dumps({
                "step": i, "mean_reward": r, "mean_completion_length": 10.0 + i % 3, "mean_kl": 0.01 * i,
                "objective_value": 0.0, "grad_norm": 1.0,
            }) + "\n")


class TestReport:
    def test_constant_no_collapse(self, tmp_path):
        write_metrics(tmp_path / "m.jsonl", [1.5] * 100)
        assert cmd_report(tmp_path / "m.jsonl")["reward_collapse"] is False

    def test_peak_then_halve(self):
        # deciles 1..10 rise to 2.0 at decile 6 and end at 0.9 < 0.5 * 2.0
        series = np.repeat([0.5, 1.0, 1.5, 1.8, 1.9, 2.0, 1.6, 1.2, 1.0, 0.9], 10)
        assert detect_collapse(series)
        assert not detect_collapse(np.repeat([0.5, 1.0, 1.5, 1.8, 1.9, 2.0, 1.6, 1.2, 1.1, 1.0], 10))

    def test_row_count_and_summary(self, tmp_path):
        write_metrics(tmp_path / "m.jsonl", list(np.linspace(0, 3, 500)))
        summary = cmd_report(tmp_path / "m.jsonl", tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert len(lines) == 501
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert summary["mean_reward"]["max"] == 3.0 and summary["mean_reward"]["final"] == 3.0
        assert summary["mean_completion_length"]["min"] == 10.0

    def test_empty_log(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("")
        with pytest.raises(DataError):
            cmd_report(tmp_path / "m.jsonl")


class TestCli:
    def test_curate_boxed_only(self, tmp_path):
        out, trace = tmp_path / "kept.jsonl", tmp_path / "trace.jsonl"
        code = main(["curate", "--in", str(DATA / "curation_fixture.jsonl"), "--out", str(out),
                     "--stages", "boxed", "--trace-out", str(trace)])
        assert code == 0
        assert len(load_jsonl(out)) == 160
        stages = {t.stage for r in load_jsonl(trace) for t in r.filter_trace}
        assert stages == {"boxed"}

    def test_curate_full(self, tmp_path, capsys):
        assert main(["curate", "--in", str(DATA / "curation_fixture.jsonl"), "--out", str(tmp_path / "o.jsonl")]) == 0
        counts = [n for _, n in json.loads(capsys.readouterr().out)["counts"]]
        assert all(a > b for a, b in zip(counts, counts[1:]))

    def test_curate_invalid_stage(self, tmp_path, capsys):
        code = main(["curate", "--in", str(DATA / "curation_fixture.jsonl"), "--out", str(tmp_path / "o.jsonl"),
                     "--stages", "boxed,sparkle"])
        assert code == 1
        assert "sparkle" in capsys.readouterr().err

    def test_verify(self, tmp_path):
        inp = tmp_path / "p.jsonl"
        inp.write_text(
            json.dumps({"id": 1, "prediction": "<think>a</think>\\boxed{0.5}", "gold": "1/2"}) + "\n"
            + json.dumps({"id": 2, "prediction": "\\boxed{3}", "gold": "4"}) + "\n"
        )
        out = tmp_path / "v.jsonl"
        assert main(["verify", "--in", str(inp), "--out", str(out)]) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert rows == [
            {"id": 1, "extracted": "0.5", "correct": 1, "format_ok": 1},
            {"id": 2, "extracted": "3", "correct": 0, "format_ok": 0},
        ]

    def test_mix(self, tmp_path):
        pools = {}
        for name in ("s1", "deepscaler", "easy"):
            pools[name] = tmp_path / f"{name}.jsonl"
            pools[name].write_text("".join(
                json.dumps({"id": f"{name}-{i}", "question": "q", "solution": "\\boxed{1}", "source": name}) + "\n"
                for i in range(5)
            ))
        out = tmp_path / "mix.jsonl"
        code = main(["mix", "--s1", str(pools["s1"]), "--deepscaler", str(pools["deepscaler"]),
                     "--easy", str(pools["easy"]), "--counts", "3,3,1", "--out", str(out)])
        assert code == 0
        assert sorted(r.source for r in load_jsonl(out)) == ["deepscaler"] * 3 + ["easy"] + ["s1"] * 3

    def test_exit_codes(self, tmp_path):
        assert main(["bogus"]) == 1
        assert main(["report", str(tmp_path / "absent.jsonl")]) == 2
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "a"}\n')
        assert main(["curate", "--in", str(bad), "--out", str(tmp_path / "o.jsonl")]) == 2
        assert main(["mix", "--s1", str(bad), "--deepscaler", str(bad), "--easy", str(bad), "--counts", "1,x,1",
                     "--out", str(tmp_path / "o.jsonl")]) == 1

    def test_train_and_eval_cli(self, tmp_path, capsys):
        init = tmp_path / "init.bin"
        checkpoint.save(random_params(5, scale=0.3), init)
        cfg = tmp_path / "c.txt"
        cfg.write_text("num_generations: 2\nprompts_per_step: 2\ngradient_accumulation_steps: 1\nmax_len: 8\n")
        out = tmp_path / "run"
        code = main(["train", "--config", str(cfg), "--max-steps", "2", "--init-checkpoint", str(init), "--out", str(out)])
        assert code == 0
        bench = tmp_path / "bench.jsonl"
        bench.write_text("".join(json.dumps(r.to_json()) + "\n" for r in synthetic_records(9, 10)))
        capsys.readouterr()
        code = main(["eval", "--checkpoint", str(out / "checkpoint-000002.bin"), "--benchmark", str(bench), "--max-len", "8"])
        assert code == 0
        assert json.loads(capsys.readouterr().out)["n_problems"] == 10

    def test_numerical_abort_exit(self, tmp_path, monkeypatch):
        from grpo_lab import harness
        from grpo_lab.grpo import NumericalAbort

        def boom(*a, **k):
            raise NumericalAbort("non-finite gradient", {"step": 0})

        monkeypatch.setattr(harness, "train_step", boom)
        init = tmp_path / "init.bin"
        checkpoint.save(random_params(5, scale=0.3), init)
        code = main(["train", "--max-steps", "2", "--init-checkpoint", str(init), "--out", str(tmp_path / "run")])
        assert code == 3
        assert (tmp_path / "run" / "checkpoint-000000.bin").exists()
