"""Prompt rendering for every generation strategy, plus table extraction.

Five strategies are supported: zero-shot, 1-shot, both with an optional
chain-of-thought suffix, and the guided variant that walks the model through
five sub-tasks (header explanation, abbreviation expansion, data format
resolution, entity extraction and grouping, table generation) in one prompt.

Templates live as text assets with named placeholders ({passage},
{row_headers}, {column_headers}, {format_spec}, {shot_passage}, {shot_table});
rendering is pure, so equal inputs give byte-identical messages.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .backend import (
    Backend,
    CallLedger,
    ChatMessage,
    ModelSettings,
    TranscriptWriter,
    complete,
)
from .corpus import ExperimentExample, TableTarget
from .table import EmptyInput, HeaderlessTable, Table, parse_grid, repair_table, serialize_grid

DEFAULT_SENTINEL = "FINAL TABLE"


class MissingShotExample(ValueError):
    """A 1-shot strategy was selected without a usable shot example."""


class EmptySchema(ValueError):
    """The target table has no column headers to prompt for."""


class NoTableFound(ValueError):
    """The model response contains no parsable pipe grid."""


class StrategyKind(str, Enum):
    ZERO_SHOT = "zero_shot"
    ONE_SHOT = "one_shot"
    ZERO_SHOT_COT = "zero_shot_cot"
    ONE_SHOT_COT = "one_shot_cot"
    SUBTASK_GUIDED = "subtask_guided"


ONE_SHOT_KINDS = (StrategyKind.ONE_SHOT, StrategyKind.ONE_SHOT_COT)


@dataclass(frozen=True)
class Strategy:
    """A strategy choice; shot_example is present exactly for 1-shot kinds."""

    kind: StrategyKind
    shot_example: ExperimentExample | None = None

    def __post_init__(self) -> None:
        if self.kind in ONE_SHOT_KINDS and self.shot_example is None:
            raise MissingShotExample(f"strategy {self.kind.value} needs a shot example")
        if self.kind not in ONE_SHOT_KINDS and self.shot_example is not None:
            raise ValueError(f"strategy {self.kind.value} takes no shot example")


@dataclass(frozen=True)
class PromptPlan:
    messages: tuple[ChatMessage, ...]
    stage_label: str
    target: TableTarget


@lru_cache(maxsize=None)
def template(name: str) -> str:
    """Load a prompt template asset by name (without the .txt suffix)."""
    return (resources.files("tabgen") / "templates" / f"{name}.txt").read_text(
        encoding="utf-8"
    )


def _shot_fields(strategy: Strategy, target: TableTarget) -> dict:
    shot = strategy.shot_example
    assert shot is not None
    shot_target = next((t for t in shot.targets if t.name == target.name), None)
    if shot_target is None or shot_target.gold is None:
        raise MissingShotExample(
            f"shot example {shot.id!r} has no gold {target.name!r} table"
        )
    return {"shot_passage": shot.passage, "shot_table": serialize_grid(shot_target.gold)}


def build_prompt(
    strategy: Strategy,
    example: ExperimentExample,
    target: TableTarget,
    *,
    sentinel: str = DEFAULT_SENTINEL,
) -> PromptPlan:
    """Render the generation prompt for one target table. Pure."""
    if not target.column_headers:
        raise EmptySchema(f"target {target.name!r} has no column headers")

    fields = {
        "table_name": target.name,
        "passage": example.passage,
        "row_headers": ", ".join(target.row_headers),
        "column_headers": " | ".join(target.column_headers),
        "format_spec": template("format_spec").format(sentinel=sentinel).strip(),
        "sentinel": sentinel,
    }
    kind = strategy.kind
    if kind == StrategyKind.SUBTASK_GUIDED:
        body = template("subtasks").format(**fields)
    elif kind in ONE_SHOT_KINDS:
        body = template("one_shot").format(**fields, **_shot_fields(strategy, target))
    else:
        body = template("zero_shot").format(**fields)
    if kind in (StrategyKind.ZERO_SHOT_COT, StrategyKind.ONE_SHOT_COT):
        body = body.strip() + "\n\n" + template("cot_suffix").strip()

    messages = (
        ChatMessage("system", template("system").strip()),
        ChatMessage("user", body.strip()),
    )
    return PromptPlan(messages=messages, stage_label="generate", target=target)


def _pipe_blocks(text: str) -> list[str]:
    """Contiguous runs of two or more lines that each contain a pipe."""
    blocks: list[str] = []
    current: list[str] = []
    for line in text.splitlines():
        if "|" in line:
            current.append(line)
        else:
            if len(current) >= 2:
                blocks.append("\n".join(current))
            current = []
    if len(current) >= 2:
        blocks.append("\n".join(current))
    return blocks


def extract_table(
    response_text: str,
    target: TableTarget,
    *,
    sentinel: str = DEFAULT_SENTINEL,
) -> Table:
    """Pull the answer table out of a free-form model response.

    The first pipe block after the last sentinel heading wins; without a
    sentinel (models ignore instructions) the last pipe block in the response
    is used. The parsed grid is repaired against the target schema.
    """
    if not response_text or not response_text.strip():
        raise NoTableFound("empty response")
    block: str | None = None
    idx = response_text.rfind(sentinel)
    if idx != -1:
        after = _pipe_blocks(response_text[idx + len(sentinel):])
        if after:
            block = after[0]
    if block is None:
        blocks = _pipe_blocks(response_text)
        if not blocks:
            raise NoTableFound("no block of two or more pipe-delimited lines")
        block = blocks[-1]
    try:
        parsed = parse_grid(block, name=target.name)
    except (EmptyInput, HeaderlessTable) as exc:
        raise NoTableFound(f"pipe block does not parse as a grid: {exc}") from exc
    return repair_table(parsed, target.column_headers)


@dataclass(frozen=True)
class GenerationResult:
    table: Table
    fingerprints: tuple[str, ...]

    @property
    def n_calls(self) -> int:
        return len(self.fingerprints)


def run_generation(
    example: ExperimentExample,
    target: TableTarget,
    strategy: Strategy,
    backend: Backend,
    ledger: CallLedger,
    *,
    settings: ModelSettings = ModelSettings(),
    transcript: TranscriptWriter | None = None,
    sentinel: str = DEFAULT_SENTINEL,
) -> GenerationResult:
    """Generate one table with a single model call.

    If no table can be extracted, exactly one re-ask is issued with an
    output-only-the-table instruction appended to the conversation; a second
    miss raises NoTableFound.
    """
    plan = build_prompt(strategy, example, target, sentinel=sentinel)
    request = settings.request(plan.messages)
    response = complete(
        backend,
        request,
        ledger,
        example_id=example.id,
        stage_label=plan.stage_label,
        transcript=transcript,
    )
    try:
        table = extract_table(response.text, target, sentinel=sentinel)
        return GenerationResult(table, (request.fingerprint,))
    except NoTableFound:
        retry_messages = plan.messages + (
            ChatMessage("assistant", response.text),
            ChatMessage("user", template("re_ask").format(sentinel=sentinel).strip()),
        )
        retry = settings.request(retry_messages)
        retry_response = complete(
            backend,
            retry,
            ledger,
            example_id=example.id,
            stage_label="re-ask",
            transcript=transcript,
        )
        table = extract_table(retry_response.text, target, sentinel=sentinel)
        return GenerationResult(table, (request.fingerprint, retry.fingerprint))
