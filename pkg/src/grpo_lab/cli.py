"""Command line entry point: ``grpo-lab {train,eval,curate,mix,verify,report}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .curation import (
    STAGES,
    DataError,
    HeuristicScorer,
    PolicyPassRateScorer,
    load_jsonl,
    mix_datasets,
    read_counts,
    read_jsonl,
    run_pipeline,
    save_jsonl,
    write_jsonl,
)
from .harness import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ConfigError
from .rewards import accuracy_reward, format_reward
from .verifier import extract_boxed

log = logging.getLogger("grpo_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _train(args) -> int:
    overrides = {
        "preset": args.preset,
        "answer_mode": args.answer_mode,
        "max_steps": args.max_steps,
        "seed": args.seed,
        "checkpoint_dir": args.out,
        "dataset": args.dataset,
        "init_checkpoint": args.init_checkpoint,
    }
    config = harness.load_config(args.config, overrides)
    result = harness.cmd_train(config)
    print(json.dumps({
        "steps": result.steps_run,
        "checkpoints": [str(p) for p in result.checkpoints],
        "metrics": str(harness.Path(config.checkpoint_dir) / "metrics.jsonl"),
    }))
    if result.aborted is not None:
        print(f"numerical abort: {result.aborted}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _eval(args) -> int:
    records = load_jsonl(args.benchmark)
    report = harness.cmd_eval(
        args.checkpoint, records, args.seed,
        benchmark=args.name or args.benchmark,
        temperature=args.temperature,
        max_len=args.max_len,
        out=args.out,
    )
    print(json.dumps({k: v for k, v in report.to_json().items() if k != "verdicts"}))
    return EXIT_OK


def _curate(args) -> int:
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise UsageError(f"invalid stage {bad[0]!r}; valid stages: {', '.join(STAGES)}")
    records = load_jsonl(args.inp)
    if args.scorer == "policy":
        if not args.checkpoint:
            raise UsageError("--scorer policy requires --checkpoint")
        from . import checkpoint

        scorer = PolicyPassRateScorer(checkpoint.load(args.checkpoint), k=args.k, seed=args.seed)
    else:
        scorer = HeuristicScorer()
    result = run_pipeline(records, stages, scorer=scorer, drop_above=args.drop_above)
    save_jsonl(result.kept, args.out)
    if args.trace_out:
        save_jsonl(result.records, args.trace_out)
    print(json.dumps({"counts": result.counts}))
    return EXIT_OK


def _mix(args) -> int:
    try:
        counts = read_counts(args.counts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    mixed = mix_datasets(load_jsonl(args.s1), load_jsonl(args.deepscaler), load_jsonl(args.easy), counts, args.seed)
    save_jsonl(mixed, args.out)
    print(json.dumps({"records": len(mixed)}))
    return EXIT_OK


def _verify(args) -> int:
    out = []
    for lineno, doc in enumerate(read_jsonl(args.inp), start=1):
        try:
            rid, pred, gold = doc["id"], doc["prediction"], doc["gold"]
        except KeyError as exc:
            raise DataError(f"{args.inp}: line {lineno}: missing required key {exc.args[0]!r}") from None
        out.append({
            "id": rid,
            "extracted": extract_boxed(pred),
            "correct": int(accuracy_reward(pred, str(gold))),
            "format_ok": int(format_reward(pred)),
        })
    if args.out:
        write_jsonl(args.out, out)
    else:
        for doc in out:
            print(json.dumps(doc))
    return EXIT_OK


def _report(args) -> int:
    summary = harness.cmd_report(args.metrics, args.csv)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grpo-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run GRPO training")
    p.add_argument("--config", help="flat key: value config file")
    p.add_argument("--preset", choices=sorted(harness.PRESETS))
    p.add_argument("--answer-mode", choices=["accuracy", "cosine"])
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="JSONL path or synthetic:<difficulty>[:n]")
    p.add_argument("--init-checkpoint")
    p.add_argument("--out", help="checkpoint directory")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="zero-shot pass@1 of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--benchmark", required=True, help="JSONL problem records with answers")
    p.add_argument("--name")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=_eval)

    p = sub.add_parser("curate", help="run the filtering pipeline")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", default=",".join(STAGES))
    p.add_argument("--drop-above", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scorer", choices=["heuristic", "policy"], default="heuristic")
    p.add_argument("--checkpoint", help="policy checkpoint for --scorer policy")
    p.add_argument("--k", type=int, default=8, help="samples per record for --scorer policy")
    p.add_argument("--trace-out", help="also write every input record with its filter trace")
    p.set_defaults(func=_curate)

    p = sub.add_parser("mix", help="mix curated pools")
    p.add_argument("--s1", required=True)
    p.add_argument("--deepscaler", required=True)
    p.add_argument("--easy", required=True)
    p.add_argument("--counts", default="3000,3000,1000")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_mix)

    p = sub.add_parser("verify", help="grade JSONL predictions")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_verify)

    p = sub.add_parser("report", help="CSV and summary of a metrics log")
    p.add_argument("metrics")
    p.add_argument("--csv")
    p.set_defaults(func=_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
