"""End-to-end experiment orchestration: configuration, runs, evaluation, stats.

A run processes each corpus example through generate -> optional refine ->
score and writes four artifacts into a content-addressed directory: the call
transcript (which doubles as a replay script), the refinement trace, the
predictions, and the report plus manifest. A failed example is recorded and
skipped, never aborting the run.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .backend import (
    Backend,
    CallLedger,
    HttpBackend,
    ModelSettings,
    ReplayBackend,
    TranscriptWriter,
)
from .corpus import (
    ExperimentExample,
    MalformedLine,
    SchemaViolation,
    CorpusStats,
    compute_stats,
    load_corpus,
)
from .metrics import (
    EvalReport,
    ExampleScores,
    MATCH_AVERAGES,
    NUMERIC_POOLINGS,
    aggregate,
    exact_match_scores,
    numeric_scores,
)
from .prompts import DEFAULT_SENTINEL, Strategy, StrategyKind, run_generation
from .refine import FeedbackGranularity, RefinementConfig, refine, write_trace
from .table import EmptyInput, HeaderlessTable, Table, UnrepairableTable, parse_grid, repair_table, serialize_grid


class ConfigInvalid(ValueError):
    """The experiment configuration is unusable."""


class CorpusUnloadable(ValueError):
    """The corpus file cannot be read or does not fit its schema."""


class IdMismatch(ValueError):
    """A prediction refers to an unknown example or table."""


BACKENDS = ("http", "replay")

# Fields echoed into the report: the experiment parameters. Transport details
# (backend, endpoint, transcript, out dir) stay in the manifest only, so an
# http run and its replay produce identical reports.
_REPORT_CONFIG_FIELDS = (
    "corpus",
    "schema",
    "strategy",
    "shot_example_id",
    "feedback_level",
    "max_iterations",
    "early_stop",
    "model",
    "temperature",
    "max_output_tokens",
    "sentinel",
    "domain_rules",
    "match_average",
    "numeric_pooling",
    "limit",
    "example_ids",
)


@dataclass
class ExperimentConfig:
    corpus: str = ""
    schema: str = "generic"
    strategy: str = "zero_shot"
    shot_example_id: str | None = None
    feedback_level: str | None = None
    max_iterations: int = 2
    early_stop: bool = True
    backend: str = "replay"
    endpoint: str | None = None
    model: str = "replay-model"
    transcript: str | None = None
    api_key_env: str = "TABGEN_API_KEY"
    temperature: float = 0.0
    max_output_tokens: int = 2048
    workers: int = 1
    out: str = "runs"
    limit: int | None = None
    example_ids: list[str] | None = None
    domain_rules: str = ""
    match_average: str = "macro"
    numeric_pooling: str = "micro"
    sentinel: str = DEFAULT_SENTINEL

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot load config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigInvalid(f"config {path} must hold a JSON object")
        return cls.from_dict(values)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def report_echo(self) -> dict:
        return {name: getattr(self, name) for name in _REPORT_CONFIG_FIELDS}

    def validate(self) -> None:
        if not self.corpus:
            raise ConfigInvalid("corpus path is required")
        if self.backend not in BACKENDS:
            raise ConfigInvalid(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "replay" and not self.transcript:
            raise ConfigInvalid("replay backend requires a transcript path")
        if self.backend == "http" and (not self.endpoint or not self.model):
            raise ConfigInvalid("http backend requires endpoint and model")
        if self.workers < 1:
            raise ConfigInvalid("workers must be >= 1")
        if self.max_iterations < 1:
            raise ConfigInvalid("max_iterations must be >= 1")
        kinds = [k.value for k in StrategyKind]
        if self.strategy not in kinds:
            raise ConfigInvalid(f"strategy must be one of {kinds}, got {self.strategy!r}")
        if self.strategy in ("one_shot", "one_shot_cot") and not self.shot_example_id:
            raise ConfigInvalid(f"strategy {self.strategy!r} requires shot_example_id")
        if self.feedback_level is not None:
            levels = [g.value for g in FeedbackGranularity]
            if self.feedback_level not in levels:
                raise ConfigInvalid(
                    f"feedback_level must be one of {levels}, got {self.feedback_level!r}"
                )
        if self.match_average not in MATCH_AVERAGES:
            raise ConfigInvalid(f"match_average must be one of {MATCH_AVERAGES}")
        if self.numeric_pooling not in NUMERIC_POOLINGS:
            raise ConfigInvalid(f"numeric_pooling must be one of {NUMERIC_POOLINGS}")
        if self.limit is not None and self.limit < 1:
            raise ConfigInvalid("limit must be >= 1")


@dataclass
class RunManifest:
    run_id: str
    config: dict
    started_at: str
    finished_at: str
    examples: list[dict]
    ledger_totals: dict
    artifacts: dict

    @property
    def n_ok(self) -> int:
        return sum(1 for e in self.examples if e["status"] == "ok")

    @property
    def n_failed(self) -> int:
        return sum(1 for e in self.examples if e["status"] == "failed")

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "examples": self.examples,
            "counts": {"ok": self.n_ok, "failed": self.n_failed},
            "ledger": self.ledger_totals,
            "artifacts": self.artifacts,
        }


@dataclass
class RunResult:
    manifest: RunManifest
    report: EvalReport | None
    out_dir: Path


def _dumps(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=True) + "\n"


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def compute_run_id(config: ExperimentConfig) -> str:
    corpus_digest = hashlib.sha256(Path(config.corpus).read_bytes()).hexdigest()
    blob = json.dumps(
        {"config": config.to_dict(), "corpus_sha256": corpus_digest},
        sort_keys=True,
        ensure_ascii=True,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _allocate_run_dir(base: Path, run_id: str) -> Path:
    base.mkdir(parents=True, exist_ok=True)
    suffix = 0
    while True:
        candidate = base / (run_id if not suffix else f"{run_id}-{suffix + 1}")
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            suffix += 1


def _load_corpus_checked(path: str, schema: str) -> list[ExperimentExample]:
    try:
        return load_corpus(path, schema)
    except (OSError, MalformedLine, SchemaViolation, ValueError) as exc:
        raise CorpusUnloadable(f"{path}: {exc}") from exc


def _select_examples(
    corpus: Sequence[ExperimentExample], config: ExperimentConfig
) -> list[ExperimentExample]:
    examples = list(corpus)
    if config.example_ids:
        wanted = set(config.example_ids)
        unknown = wanted - {e.id for e in examples}
        if unknown:
            raise ConfigInvalid(f"example_ids not in corpus: {sorted(unknown)}")
        examples = [e for e in examples if e.id in wanted]
    if config.limit is not None:
        examples = examples[: config.limit]
    if not examples:
        raise ConfigInvalid("filters leave no examples to run")
    return examples


def _make_strategy(config: ExperimentConfig, corpus: Sequence[ExperimentExample]) -> Strategy:
    kind = StrategyKind(config.strategy)
    if kind in (StrategyKind.ONE_SHOT, StrategyKind.ONE_SHOT_COT):
        shot = next((e for e in corpus if e.id == config.shot_example_id), None)
        if shot is None:
            raise ConfigInvalid(f"shot_example_id {config.shot_example_id!r} not in corpus")
        return Strategy(kind, shot_example=shot)
    return Strategy(kind)


def _make_backend(config: ExperimentConfig) -> Backend:
    if config.backend == "replay":
        return ReplayBackend.from_transcript(config.transcript)
    return HttpBackend(config.endpoint, api_key_env=config.api_key_env)


@dataclass
class _Outcome:
    example_id: str
    status: str
    cause: str = ""
    scores: ExampleScores | None = None
    predictions: list[tuple[str, str]] = field(default_factory=list)
    traces: list[tuple[str, object]] = field(default_factory=list)


def _process_example(
    example: ExperimentExample,
    strategy: Strategy,
    backend: Backend,
    ledger: CallLedger,
    transcript: TranscriptWriter,
    settings: ModelSettings,
    refine_config: RefinementConfig | None,
    sentinel: str,
) -> _Outcome:
    try:
        match, numeric = {}, {}
        predictions: list[tuple[str, str]] = []
        traces: list[tuple[str, object]] = []
        for target in example.targets:
            generated = run_generation(
                example,
                target,
                strategy,
                backend,
                ledger,
                settings=settings,
                transcript=transcript,
                sentinel=sentinel,
            )
            table = generated.table
            if refine_config is not None:
                refined = refine(
                    example.passage,
                    table,
                    target,
                    refine_config,
                    backend,
                    ledger,
                    settings=settings,
                    example_id=example.id,
                    transcript=transcript,
                    sentinel=sentinel,
                )
                table = refined.final
                traces.append((target.name, refined.trace))
            predictions.append((target.name, serialize_grid(table)))
            if target.gold is not None:
                match[target.name] = exact_match_scores(table, target.gold)
                if target.column_difficulty:
                    numeric[target.name] = numeric_scores(
                        table, target.gold, target.column_difficulty
                    )
        scores = ExampleScores(example.id, match, numeric) if match or numeric else None
        return _Outcome(example.id, "ok", scores=scores, predictions=predictions, traces=traces)
    except Exception as exc:  # per-example isolation: record and move on
        return _Outcome(example.id, "failed", cause=f"{type(exc).__name__}: {exc}")


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Execute one experiment end to end, writing all artifacts to disk."""
    config.validate()
    corpus = _load_corpus_checked(config.corpus, config.schema)
    examples = _select_examples(corpus, config)
    strategy = _make_strategy(config, corpus)
    backend = _make_backend(config)
    settings = ModelSettings(config.model, config.temperature, config.max_output_tokens)
    refine_config = None
    if config.feedback_level is not None:
        refine_config = RefinementConfig(
            granularity=FeedbackGranularity(config.feedback_level),
            max_iterations=config.max_iterations,
            early_stop_on_no_change=config.early_stop,
            domain_rules=config.domain_rules,
        )

    run_id = compute_run_id(config)
    out_dir = _allocate_run_dir(Path(config.out), run_id)
    ledger = CallLedger()
    transcript = TranscriptWriter(out_dir / "transcript.jsonl")
    started_at = _utcnow()

    def work(example: ExperimentExample) -> _Outcome:
        return _process_example(
            example, strategy, backend, ledger, transcript, settings, refine_config, config.sentinel
        )

    if config.workers > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(work, examples))
    else:
        outcomes = [work(e) for e in examples]

    trace_path = out_dir / "trace.jsonl"
    trace_path.touch()
    predictions_path = out_dir / "predictions.jsonl"
    with open(predictions_path, "w", encoding="utf-8") as fh:
        for outcome in outcomes:
            for name, grid in outcome.predictions:
                fh.write(
                    json.dumps(
                        {"id": outcome.example_id, "name": name, "grid": grid},
                        ensure_ascii=True,
                    )
                    + "\n"
                )
    for outcome in outcomes:
        for name, trace in outcome.traces:
            write_trace(trace, trace_path, example_id=outcome.example_id, table_name=name)

    scored = [o.scores for o in outcomes if o.scores is not None]
    report: EvalReport | None = None
    if scored:
        report = aggregate(
            scored,
            match_average=config.match_average,
            numeric_pooling=config.numeric_pooling,
            config=config.report_echo(),
            ledger_totals=ledger.totals(),
        )
        report_dict = report.to_dict()
    else:
        report_dict = {
            "exact_match": None,
            "numeric": None,
            "per_example": [],
            "config": config.report_echo(),
            "ledger": ledger.totals(),
        }
    report_path = out_dir / "report.json"
    report_path.write_text(_dumps(report_dict), encoding="utf-8")

    manifest = RunManifest(
        run_id=run_id,
        config=config.to_dict(),
        started_at=started_at,
        finished_at=_utcnow(),
        examples=[
            {"id": o.example_id, "status": o.status, **({"cause": o.cause} if o.cause else {})}
            for o in outcomes
        ],
        ledger_totals=ledger.totals(),
        artifacts={
            "transcript": str(transcript.path),
            "trace": str(trace_path),
            "predictions": str(predictions_path),
            "report": str(report_path),
            "manifest": str(out_dir / "manifest.json"),
        },
    )
    (out_dir / "manifest.json").write_text(_dumps(manifest.to_dict()), encoding="utf-8")
    return RunResult(manifest=manifest, report=report, out_dir=out_dir)


def load_predictions(path: str | Path) -> dict[tuple[str, str], str]:
    """Read a predictions JSONL file mapping (example id, table name) -> grid."""
    predictions: dict[tuple[str, str], str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = (obj["id"], obj["name"])
                grid = obj["grid"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedLine(line_no, str(exc)) from exc
            predictions[key] = grid
    return predictions


def evaluate_predictions(
    predictions_path: str | Path,
    corpus_path: str | Path,
    schema: str = "generic",
    *,
    match_average: str = "macro",
    numeric_pooling: str = "micro",
) -> EvalReport:
    """Score a predictions file against a corpus without any model calls.

    A gold target with no prediction line scores as an empty table.
    """
    corpus = _load_corpus_checked(str(corpus_path), schema)
    predictions = load_predictions(predictions_path)
    if not predictions:
        raise EmptyInput(f"predictions file {predictions_path} has no entries")

    known = {(e.id, t.name) for e in corpus for t in e.targets}
    for key in predictions:
        if key not in known:
            raise IdMismatch(f"prediction for unknown example/table {key!r}")

    per_example: list[ExampleScores] = []
    for example in corpus:
        match, numeric = {}, {}
        for target in example.targets:
            if target.gold is None:
                continue
            grid = predictions.get((example.id, target.name))
            if grid is None:
                table = Table(target.column_headers, (), name=target.name)
            else:
                try:
                    table = repair_table(
                        parse_grid(grid, name=target.name), target.column_headers
                    )
                except (EmptyInput, HeaderlessTable, UnrepairableTable) as exc:
                    raise type(exc)(
                        f"prediction for ({example.id!r}, {target.name!r}): {exc}"
                    ) from exc
            match[target.name] = exact_match_scores(table, target.gold)
            if target.column_difficulty:
                numeric[target.name] = numeric_scores(table, target.gold, target.column_difficulty)
        if match or numeric:
            per_example.append(ExampleScores(example.id, match, numeric))
    if not per_example:
        raise EmptyInput("corpus has no gold tables to score against")
    return aggregate(
        per_example,
        match_average=match_average,
        numeric_pooling=numeric_pooling,
        config={"predictions": str(predictions_path), "corpus": str(corpus_path)},
    )


def corpus_stats(corpus_path: str | Path, schema: str = "generic") -> CorpusStats:
    return compute_stats(_load_corpus_checked(str(corpus_path), schema))
