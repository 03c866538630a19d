"""JSONL corpus loading for RotoWire- and LiveSum-shaped data, plus statistics.

The interchange schema is one JSON object per line::

    {"id": "...", "passage": "...", "split": "train|validation|test",
     "tables": [{"name": "...", "columns": [...], "rows": [[...]],
                 "row_headers": [...], "difficulty": {"col": "easy|medium|hard"}}]}

``rows`` are full grid rows including the row-header cell at index 0 and are
optional for pure-inference corpora (then ``row_headers`` is required).
Numeric cells may be written as JSON numbers; they are read back as strings.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import json

from .table import InvalidTable, Table

SPLITS = ("train", "validation", "test")
SCHEMAS = ("rotowire", "livesum", "generic")
DIFFICULTY_LEVELS = ("easy", "medium", "hard")
ROTOWIRE_TABLE_NAMES = ("Player", "Team")
LIVESUM_ROW_HEADERS = ("Home Team", "Away Team")


class MalformedLine(ValueError):
    """A corpus line is not valid JSON."""

    def __init__(self, line_no: int, cause: str):
        super().__init__(f"line {line_no}: {cause}")
        self.line_no = line_no
        self.cause = cause


class SchemaViolation(ValueError):
    """A corpus line is valid JSON but violates the corpus schema."""


@dataclass(frozen=True)
class TableTarget:
    """One table an example asks for: schema, row entities, optional gold."""

    name: str
    column_headers: tuple[str, ...]
    row_headers: tuple[str, ...]
    gold: Table | None = None
    column_difficulty: Mapping[str, str] | None = None


@dataclass(frozen=True)
class ExperimentExample:
    id: str
    passage: str
    targets: tuple[TableTarget, ...]
    split: str


@dataclass(frozen=True)
class TableStats:
    """Per-table-name averages over every example carrying a gold table."""

    n_tables: int
    avg_rows: float
    avg_cols: float
    avg_nonempty_cells: float
    nonempty_pct: float

    def to_dict(self) -> dict:
        return {
            "n_tables": self.n_tables,
            "avg_rows": self.avg_rows,
            "avg_cols": self.avg_cols,
            "avg_nonempty_cells": self.avg_nonempty_cells,
            "nonempty_pct": self.nonempty_pct,
        }


@dataclass(frozen=True)
class CorpusStats:
    n_examples: Mapping[str, int]
    avg_tokens: float
    tables: Mapping[str, TableStats]

    def to_dict(self) -> dict:
        return {
            "n_examples": dict(self.n_examples),
            "avg_tokens": self.avg_tokens,
            "tables": {name: st.to_dict() for name, st in self.tables.items()},
        }


def _as_cell(value: object, line_no: int) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        raise SchemaViolation(f"line {line_no}: boolean cell {value!r}")
    if isinstance(value, (int, float)):
        return str(value)
    raise SchemaViolation(f"line {line_no}: cell {value!r} is not a string or number")


def _parse_target(obj: dict, line_no: int) -> TableTarget:
    name = obj.get("name")
    columns = obj.get("columns")
    if not isinstance(name, str) or not name.strip():
        raise SchemaViolation(f"line {line_no}: table is missing a name")
    if not isinstance(columns, list) or len(columns) < 2:
        raise SchemaViolation(
            f"line {line_no}: table {name!r} needs a row-header column plus data columns"
        )
    columns = tuple(str(c) for c in columns)

    gold = None
    raw_rows = obj.get("rows")
    if raw_rows is not None:
        if not isinstance(raw_rows, list):
            raise SchemaViolation(f"line {line_no}: table {name!r} rows must be a list")
        rows = [[_as_cell(c, line_no) for c in r] for r in raw_rows]
        try:
            gold = Table.from_lists(columns, rows, name=name)
            gold.validate()
        except InvalidTable as exc:
            raise SchemaViolation(f"line {line_no}: gold table {name!r} invalid: {exc}") from exc

    raw_headers = obj.get("row_headers")
    if raw_headers is not None:
        if not isinstance(raw_headers, list):
            raise SchemaViolation(f"line {line_no}: row_headers must be a list")
        row_headers = tuple(str(h) for h in raw_headers)
    elif gold is not None:
        row_headers = tuple(row.header for row in gold.rows)
    else:
        raise SchemaViolation(
            f"line {line_no}: table {name!r} has neither rows nor row_headers"
        )

    difficulty = obj.get("difficulty")
    if difficulty is not None:
        if not isinstance(difficulty, dict):
            raise SchemaViolation(f"line {line_no}: difficulty must be a mapping")
        for col, level in difficulty.items():
            if col not in columns:
                raise SchemaViolation(
                    f"line {line_no}: difficulty key {col!r} is not a column of {name!r}"
                )
            if level not in DIFFICULTY_LEVELS:
                raise SchemaViolation(f"line {line_no}: unknown difficulty level {level!r}")
        difficulty = dict(difficulty)

    return TableTarget(
        name=name,
        column_headers=columns,
        row_headers=row_headers,
        gold=gold,
        column_difficulty=difficulty,
    )


def _parse_example(obj: object, line_no: int, schema: str) -> ExperimentExample:
    if not isinstance(obj, dict):
        raise SchemaViolation(f"line {line_no}: expected a JSON object")
    for key in ("id", "passage", "split", "tables"):
        if key not in obj:
            raise SchemaViolation(f"line {line_no}: missing required field {key!r}")
    example_id = obj["id"]
    passage = obj["passage"]
    split = obj["split"]
    tables = obj["tables"]
    if not isinstance(example_id, str) or not example_id:
        raise SchemaViolation(f"line {line_no}: id must be a non-empty string")
    if not isinstance(passage, str) or not passage.strip():
        raise SchemaViolation(f"line {line_no}: passage must be a non-empty string")
    if split not in SPLITS:
        raise SchemaViolation(f"line {line_no}: split {split!r} not one of {SPLITS}")
    if not isinstance(tables, list) or not tables:
        raise SchemaViolation(f"line {line_no}: tables must be a non-empty list")

    targets = [_parse_target(t, line_no) for t in tables]

    if schema == "rotowire":
        names = sorted(t.name for t in targets)
        if names != sorted(ROTOWIRE_TABLE_NAMES):
            raise SchemaViolation(
                f"line {line_no}: rotowire examples need exactly tables "
                f"{list(ROTOWIRE_TABLE_NAMES)}, got {names}"
            )
        by_name = {t.name: t for t in targets}
        targets = [by_name[n] for n in ROTOWIRE_TABLE_NAMES]
    elif schema == "livesum":
        if len(targets) != 1:
            raise SchemaViolation(f"line {line_no}: livesum examples carry exactly one table")
        if targets[0].row_headers != LIVESUM_ROW_HEADERS:
            raise SchemaViolation(
                f"line {line_no}: livesum row headers must be {list(LIVESUM_ROW_HEADERS)}, "
                f"got {list(targets[0].row_headers)}"
            )

    return ExperimentExample(
        id=example_id, passage=passage, targets=tuple(targets), split=split
    )


def load_corpus(path: str | Path, schema: str = "generic") -> list[ExperimentExample]:
    """Load a JSONL corpus. Deterministic: example order is file order."""
    if schema not in SCHEMAS:
        raise ValueError(f"schema must be one of {SCHEMAS}, got {schema!r}")
    examples: list[ExperimentExample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, str(exc)) from exc
            example = _parse_example(obj, line_no, schema)
            if example.id in seen:
                raise SchemaViolation(f"line {line_no}: duplicate example id {example.id!r}")
            seen.add(example.id)
            examples.append(example)
    return examples


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def compute_stats(corpus: Sequence[ExperimentExample]) -> CorpusStats:
    """Averages per table name across all examples; tokens split on whitespace.

    Rows and columns count data rows / data columns (header row and row-header
    column excluded). The non-empty percentage is the mean of per-table fill
    percentages, weighting every gold table equally.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    n_examples = Counter(e.split for e in corpus)
    avg_tokens = _mean([len(e.passage.split()) for e in corpus])

    per_table: dict[str, list[tuple[int, int, int, float]]] = {}
    for example in corpus:
        for target in example.targets:
            if target.gold is None:
                continue
            gold = target.gold
            rows = gold.n_data_rows
            cols = gold.n_data_columns
            nonempty = sum(1 for _, _, v in gold.data_cells() if v.strip())
            total = rows * cols
            pct = 100.0 * nonempty / total if total else 0.0
            per_table.setdefault(target.name, []).append((rows, cols, nonempty, pct))

    tables = {
        name: TableStats(
            n_tables=len(samples),
            avg_rows=_mean([s[0] for s in samples]),
            avg_cols=_mean([s[1] for s in samples]),
            avg_nonempty_cells=_mean([s[2] for s in samples]),
            nonempty_pct=_mean([s[3] for s in samples]),
        )
        for name, samples in sorted(per_table.items())
    }
    return CorpusStats(n_examples=dict(n_examples), avg_tokens=avg_tokens, tables=tables)


def mini_corpus_path(schema: str) -> Path:
    """Path of the bundled 5-example synthetic corpus for tests and demos."""
    if schema not in ("rotowire", "livesum"):
        raise ValueError(f"no bundled mini corpus for schema {schema!r}")
    return Path(str(resources.files("tabgen") / "data" / f"mini_{schema}.jsonl"))
