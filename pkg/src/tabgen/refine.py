"""Iterative self-refinement of generated tables via model feedback.

Feedback runs at one of three granularities. Per iteration, table-level
feedback costs one call, row-level one call per data row, and cell-level one
call per data cell; the call-count law is checked against the ledger in tests.
Response contracts are strict (NO_CHANGE, or KEEP / VALUE: for cells) and
anything unparseable fails closed to keep, so a malformed critique can never
corrupt a table. Row- and cell-level feedback only ever change cell values,
never headers or table shape.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

from .backend import (
    Backend,
    CallLedger,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    ModelSettings,
    TranscriptWriter,
    complete,
)
from .corpus import TableTarget
from .prompts import DEFAULT_SENTINEL, NoTableFound, extract_table, template
from .table import Row, Table, normalize_cell, serialize_grid, split_cells

NO_CHANGE_TOKEN = "NO_CHANGE"
KEEP_TOKEN = "KEEP"
VALUE_PREFIX = "VALUE:"
UNPARSEABLE_NOTE = "unparseable-feedback"


class FeedbackGranularity(str, Enum):
    TABLE = "table"
    ROW = "row"
    CELL = "cell"


@dataclass(frozen=True)
class RefinementConfig:
    granularity: FeedbackGranularity = FeedbackGranularity.CELL
    max_iterations: int = 2
    early_stop_on_no_change: bool = True
    workers: int = 1
    domain_rules: str = ""

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class FeedbackEntry:
    """One per-unit verdict from one feedback round."""

    iteration: int
    unit_id: str
    verdict: str  # "keep" | "revise"
    old_value: str
    new_value: str
    feedback_text: str
    note: str = ""


@dataclass
class RefinementTrace:
    entries: list[FeedbackEntry] = field(default_factory=list)
    tables: list[Table] = field(default_factory=list)

    @property
    def iterations_run(self) -> int:
        return len(self.tables) - 1

    def revisions(self, iteration: int | None = None) -> int:
        return sum(
            1
            for e in self.entries
            if e.verdict == "revise" and (iteration is None or e.iteration == iteration)
        )


@dataclass(frozen=True)
class RefinementResult:
    final: Table
    trace: RefinementTrace


@dataclass(frozen=True)
class _CallContext:
    backend: Backend
    ledger: CallLedger
    settings: ModelSettings
    example_id: str
    transcript: TranscriptWriter | None
    sentinel: str
    workers: int = 1
    domain_rules: str = ""

    def one(self, request: ChatRequest, stage_label: str) -> ChatResponse:
        return complete(
            self.backend,
            request,
            self.ledger,
            example_id=self.example_id,
            stage_label=stage_label,
            transcript=self.transcript,
        )

    def many(self, requests: Sequence[ChatRequest], stage_label: str) -> list[ChatResponse]:
        # Unit calls within an iteration are mutually independent; results come
        # back in request order regardless of completion order.
        if self.workers <= 1 or len(requests) <= 1:
            return [self.one(r, stage_label) for r in requests]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda r: self.one(r, stage_label), requests))


def _user_messages(body: str) -> tuple[ChatMessage, ...]:
    return (ChatMessage("system", template("system").strip()), ChatMessage("user", body.strip()))


def table_feedback_round(
    passage: str,
    table: Table,
    target: TableTarget,
    ctx: _CallContext,
    iteration: int,
) -> tuple[Table, list[FeedbackEntry]]:
    """One whole-table review call; the response is NO_CHANGE or a full grid."""
    body = template("feedback_table").format(
        table_name=target.name,
        passage=passage,
        table=serialize_grid(table),
        domain_rules=ctx.domain_rules or "none for this dataset.",
        sentinel=ctx.sentinel,
    )
    response = ctx.one(ctx.settings.request(_user_messages(body)), "feedback-table")
    old = serialize_grid(table)
    try:
        revised = extract_table(response.text, target, sentinel=ctx.sentinel)
    except NoTableFound:
        note = "" if NO_CHANGE_TOKEN in response.text else UNPARSEABLE_NOTE
        return table, [FeedbackEntry(iteration, "table", "keep", old, old, response.text, note)]
    if revised == table:
        return table, [FeedbackEntry(iteration, "table", "keep", old, old, response.text)]
    return revised, [
        FeedbackEntry(iteration, "table", "revise", old, serialize_grid(revised), response.text)
    ]


def row_feedback_round(
    passage: str,
    table: Table,
    target: TableTarget,
    ctx: _CallContext,
    iteration: int,
) -> tuple[Table, list[FeedbackEntry]]:
    """One call per data row; revised rows are width-repaired and spliced in."""
    if not table.rows:
        return table, []
    requests = []
    for row in table.rows:
        body = template("feedback_row").format(
            table_name=target.name,
            passage=passage,
            column_headers=" | ".join(table.column_headers),
            row_header=row.header,
            row=" | ".join(row.cells),
        )
        requests.append(ctx.settings.request(_user_messages(body)))
    responses = ctx.many(requests, "feedback-row")

    width = table.n_columns
    entries: list[FeedbackEntry] = []
    new_rows: list[Row] = []
    for i, (row, response) in enumerate(zip(table.rows, responses)):
        unit = f"row:{i}"
        old = " | ".join(row.cells)
        pipe_lines = [ln for ln in response.text.splitlines() if "|" in ln]
        if not pipe_lines:
            note = "" if NO_CHANGE_TOKEN in response.text else UNPARSEABLE_NOTE
            entries.append(FeedbackEntry(iteration, unit, "keep", old, old, response.text, note))
            new_rows.append(row)
            continue
        cells = split_cells(pipe_lines[-1])
        header_included = bool(cells) and normalize_cell(cells[0]) == normalize_cell(row.header)
        if not header_included and len(cells) == width - 1:  # row-header cell omitted
            cells = [row.header] + cells
        cells = (cells + [""] * width)[:width]
        cells[0] = row.header  # structural edits are out of contract
        candidate = Row(tuple(c.replace("|", " ").replace("\n", " ") for c in cells))
        if candidate == row:
            entries.append(FeedbackEntry(iteration, unit, "keep", old, old, response.text))
            new_rows.append(row)
        else:
            entries.append(
                FeedbackEntry(
                    iteration, unit, "revise", old, " | ".join(candidate.cells), response.text
                )
            )
            new_rows.append(candidate)
    return Table(table.column_headers, tuple(new_rows), name=table.name), entries


def cell_feedback_round(
    passage: str,
    table: Table,
    target: TableTarget,
    ctx: _CallContext,
    iteration: int,
) -> tuple[Table, list[FeedbackEntry]]:
    """One call per data cell (rows x (columns - 1)); replies are KEEP or VALUE: v."""
    coords = [(i, j) for i in range(len(table.rows)) for j in range(1, table.n_columns)]
    if not coords:
        return table, []
    requests = []
    for i, j in coords:
        body = template("feedback_cell").format(
            table_name=target.name,
            passage=passage,
            row_header=table.rows[i].header,
            column_header=table.column_headers[j],
            value=table.rows[i].cells[j],
        )
        requests.append(ctx.settings.request(_user_messages(body)))
    responses = ctx.many(requests, "feedback-cell")

    entries: list[FeedbackEntry] = []
    cells = [list(row.cells) for row in table.rows]
    for (i, j), response in zip(coords, responses):
        unit = f"cell:{i}:{j}"
        old = table.rows[i].cells[j]
        text = response.text.strip()
        if text == KEEP_TOKEN:
            entries.append(FeedbackEntry(iteration, unit, "keep", old, old, response.text))
            continue
        if text.startswith(VALUE_PREFIX):
            new = normalize_cell(text[len(VALUE_PREFIX):])
            if new == old:
                entries.append(FeedbackEntry(iteration, unit, "keep", old, old, response.text))
            else:
                entries.append(FeedbackEntry(iteration, unit, "revise", old, new, response.text))
                cells[i][j] = new
            continue
        entries.append(
            FeedbackEntry(iteration, unit, "keep", old, old, response.text, UNPARSEABLE_NOTE)
        )
    new_rows = tuple(Row(tuple(c)) for c in cells)
    return Table(table.column_headers, new_rows, name=table.name), entries


_ROUNDS: dict[FeedbackGranularity, Callable] = {
    FeedbackGranularity.TABLE: table_feedback_round,
    FeedbackGranularity.ROW: row_feedback_round,
    FeedbackGranularity.CELL: cell_feedback_round,
}


def refine(
    passage: str,
    initial: Table,
    target: TableTarget,
    config: RefinementConfig,
    backend: Backend,
    ledger: CallLedger,
    *,
    settings: ModelSettings = ModelSettings(),
    example_id: str = "",
    transcript: TranscriptWriter | None = None,
    sentinel: str = DEFAULT_SENTINEL,
) -> RefinementResult:
    """Run up to max_iterations feedback rounds, stopping early on a round
    with zero revisions when configured. Iterations are strictly sequential;
    each round sees the previous round's output."""
    ctx = _CallContext(
        backend=backend,
        ledger=ledger,
        settings=settings,
        example_id=example_id,
        transcript=transcript,
        sentinel=sentinel,
        workers=config.workers,
        domain_rules=config.domain_rules,
    )
    round_fn = _ROUNDS[config.granularity]
    trace = RefinementTrace(tables=[initial])
    table = initial
    for iteration in range(1, config.max_iterations + 1):
        table, entries = round_fn(passage, table, target, ctx, iteration)
        trace.tables.append(table)
        trace.entries.extend(entries)
        if config.early_stop_on_no_change and not any(e.verdict == "revise" for e in entries):
            break
    return RefinementResult(final=table, trace=trace)


def write_trace(
    trace: RefinementTrace,
    path: str | Path,
    *,
    example_id: str = "",
    table_name: str = "",
) -> None:
    """Append the trace as JSONL, one line per verdict."""
    with open(path, "a", encoding="utf-8") as fh:
        for e in trace.entries:
            fh.write(
                json.dumps(
                    {
                        "example_id": example_id,
                        "table_name": table_name,
                        "iteration": e.iteration,
                        "unit_id": e.unit_id,
                        "verdict": e.verdict,
                        "old_value": e.old_value,
                        "new_value": e.new_value,
                        "feedback_text": e.feedback_text,
                        "note": e.note,
                    },
                    ensure_ascii=True,
                )
                + "\n"
            )
