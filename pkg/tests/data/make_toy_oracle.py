"""Regenerate oracle_toy_learning.json: seeded exp2-toy / exp3-toy runs.

Run from the repository root: ``python3 tests/data/make_toy_oracle.py``.
"""

import json
import tempfile
from pathlib import Path

from grpo_lab.harness import build_config, cmd_eval, cmd_train, run_summary, synthetic_records

SEEDS = (0, 1, 2)


def heldout(seed):
    return synthetic_records(10_000 + seed, 100, prefix="heldout")


def run(preset, seed, out_dir):
    cfg = build_config(overrides={"preset": preset, "seed": seed, "checkpoint_dir": str(out_dir)})
    res = cmd_train(cfg)
    summary = run_summary(res.metrics)
    held = heldout(seed)
    summary["pass_at_1_step0"] = cmd_eval(res.ref_params, held, seed, max_len=cfg.max_completion_length).pass_at_1
    summary["pass_at_1_final"] = cmd_eval(res.params, held, seed, max_len=cfg.max_completion_length).pass_at_1
    summary["reward_margin"] = summary["last_reward"] - summary["first_reward"]
    return summary


def main():
    doc = {"window": 20, "heldout_size": 100, "seeds": {}}
    with tempfile.TemporaryDirectory() as tmp:
        for seed in SEEDS:
            doc["seeds"][str(seed)] = {p: run(p, seed, Path(tmp) / f"{p}-{seed}") for p in ("exp2-toy", "exp3-toy")}
    path = Path(__file__).with_name("oracle_toy_learning.json")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
