"""Command line interface: run, evaluate, stats, replay-check.

Configuration comes from an optional JSON file plus flag overrides; flags win.
The API credential is only ever read from the environment. ``run`` exits 0
iff zero examples failed.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from .backend import IoFailure
from .corpus import SCHEMAS
from .metrics import format_report
from .prompts import StrategyKind
from .refine import FeedbackGranularity
from .runner import (
    ConfigInvalid,
    CorpusUnloadable,
    ExperimentConfig,
    IdMismatch,
    corpus_stats,
    evaluate_predictions,
    run_experiment,
)
from .table import EmptyInput

_CLI_ERRORS = (
    ConfigInvalid,
    CorpusUnloadable,
    IdMismatch,
    EmptyInput,
    IoFailure,
    FileNotFoundError,
)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--corpus", help="corpus JSONL path")
    parser.add_argument("--schema", choices=SCHEMAS)
    parser.add_argument("--strategy", choices=[k.value for k in StrategyKind])
    parser.add_argument("--shot-example-id", dest="shot_example_id")
    parser.add_argument(
        "--feedback-level",
        dest="feedback_level",
        choices=[g.value for g in FeedbackGranularity],
        help="enable self-refinement at this granularity",
    )
    parser.add_argument("--max-iterations", dest="max_iterations", type=int)
    parser.add_argument(
        "--early-stop",
        dest="early_stop",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="stop refining after a round with zero revisions (default on)",
    )
    parser.add_argument("--backend", choices=("http", "replay"))
    parser.add_argument("--endpoint", help="chat-completions URL for the http backend")
    parser.add_argument("--model")
    parser.add_argument("--transcript", help="recorded transcript for the replay backend")
    parser.add_argument("--api-key-env", dest="api_key_env")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--max-output-tokens", dest="max_output_tokens", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--out", help="output directory for run artifacts")
    parser.add_argument("--limit", type=int)
    parser.add_argument(
        "--example-id",
        dest="example_ids",
        action="append",
        help="restrict the run to this example id (repeatable)",
    )
    parser.add_argument("--domain-rules", dest="domain_rules")
    parser.add_argument("--match-average", dest="match_average", choices=("macro", "example"))
    parser.add_argument(
        "--numeric-pooling", dest="numeric_pooling", choices=("micro", "per_example")
    )
    parser.add_argument("--sentinel")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = ExperimentConfig.from_file(args.config).to_dict() if args.config else {}
    for key in ExperimentConfig().to_dict():
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return ExperimentConfig.from_dict(values)


def _cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    result = run_experiment(config)
    manifest = result.manifest
    if result.report is not None:
        label = config.strategy + (
            f"+{config.feedback_level}x{config.max_iterations}" if config.feedback_level else ""
        )
        print(format_report(result.report, label=label))
    print(
        f"run {manifest.run_id}: {manifest.n_ok} ok, {manifest.n_failed} failed; "
        f"artifacts in {result.out_dir}"
    )
    for entry in manifest.examples:
        if entry["status"] == "failed":
            print(f"  failed {entry['id']}: {entry['cause']}", file=sys.stderr)
    return 0 if manifest.n_failed == 0 else 1


def _cmd_evaluate(args: argparse.Namespace) -> int:
    report = evaluate_predictions(
        args.predictions,
        args.corpus,
        args.schema,
        match_average=args.match_average or "macro",
        numeric_pooling=args.numeric_pooling or "micro",
    )
    print(format_report(report, label=Path(args.predictions).stem))
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        print(f"report written to {args.out}")
    else:
        print(payload, end="")
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    stats = corpus_stats(args.corpus, args.schema)
    splits = "  ".join(f"{k}={v}" for k, v in sorted(stats.n_examples.items()))
    print(f"examples: {splits}")
    print(f"avg passage tokens: {stats.avg_tokens:.2f}")
    for name, ts in stats.tables.items():
        print(
            f"table {name}: avg rows {ts.avg_rows:.2f}, avg cols {ts.avg_cols:.2f}, "
            f"avg non-empty cells {ts.avg_nonempty_cells:.2f} ({ts.nonempty_pct:.2f}%)"
        )
    payload = json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        print(f"stats written to {args.out}")
    else:
        print(payload, end="")
    return 0


def _cmd_replay_check(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if config.backend != "replay":
        raise ConfigInvalid("replay-check requires the replay backend")
    with tempfile.TemporaryDirectory(prefix="tabgen-replay-check-") as tmp:
        first = run_experiment(ExperimentConfig.from_dict({**config.to_dict(), "out": f"{tmp}/a"}))
        second = run_experiment(ExperimentConfig.from_dict({**config.to_dict(), "out": f"{tmp}/b"}))
        a = Path(first.manifest.artifacts["report"]).read_bytes()
        b = Path(second.manifest.artifacts["report"]).read_bytes()
    failed = first.manifest.n_failed + second.manifest.n_failed
    if a == b and failed == 0:
        print(f"replay-check ok: reports byte-identical over {first.manifest.n_ok} examples")
        return 0
    if a != b:
        print("replay-check FAILED: reports differ between consecutive runs", file=sys.stderr)
    if failed:
        print(f"replay-check FAILED: {failed} example(s) failed", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabgen",
        description="Text-to-table generation pipeline and evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment end to end")
    _add_run_flags(run_p)
    run_p.set_defaults(func=_cmd_run)

    eval_p = sub.add_parser("evaluate", help="score a predictions file against a corpus")
    eval_p.add_argument("--predictions", required=True)
    eval_p.add_argument("--corpus", required=True)
    eval_p.add_argument("--schema", choices=SCHEMAS, default="generic")
    eval_p.add_argument("--match-average", dest="match_average", choices=("macro", "example"))
    eval_p.add_argument(
        "--numeric-pooling", dest="numeric_pooling", choices=("micro", "per_example")
    )
    eval_p.add_argument("--out", help="write the report JSON here instead of stdout")
    eval_p.set_defaults(func=_cmd_evaluate)

    stats_p = sub.add_parser("stats", help="print corpus statistics")
    stats_p.add_argument("--corpus", required=True)
    stats_p.add_argument("--schema", choices=SCHEMAS, default="generic")
    stats_p.add_argument("--out", help="write the stats JSON here instead of stdout")
    stats_p.set_defaults(func=_cmd_stats)

    replay_p = sub.add_parser(
        "replay-check", help="run twice on a replay transcript and compare reports"
    )
    _add_run_flags(replay_p)
    replay_p.set_defaults(func=_cmd_replay_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _CLI_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
