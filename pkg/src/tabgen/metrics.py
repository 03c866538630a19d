"""Evaluation: exact-match F1 over cell tuples, RMSE and cell-level error
rate grouped by column difficulty, and aggregation across examples.

Exact match aligns predicted and gold cells as (row header, column header,
value) tuples with set semantics; duplicate row headers therefore merge.
The headline number averages table-type means (macro) by default; numeric
scores pool cells across examples (micro) by default. Both choices are
overridable and echoed in the report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .table import CellTuple, Table, cell_tuples, normalize_cell


class GoldNotNumeric(ValueError):
    """A gold cell inside a difficulty-scored column is not an integer."""


class SimilarityScorer(Protocol):
    """Optional hook for a soft scorer: similarity in [0, 1] between a
    predicted and a gold cell tuple, replacing exact equality. No
    implementation is bundled; exact match is the primary metric."""

    def __call__(self, pred: CellTuple, gold: CellTuple) -> float: ...


@dataclass(frozen=True)
class MatchScores:
    precision: float
    recall: float
    f1: float
    n_pred: int
    n_gold: int
    n_matched: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "n_pred": self.n_pred,
            "n_gold": self.n_gold,
            "n_matched": self.n_matched,
        }


@dataclass(frozen=True)
class LevelScores:
    """Numeric scores for one difficulty level. sse is kept so levels pool
    exactly across examples."""

    n_cells: int
    n_errors: int
    sse: float
    rmse: float
    error_rate: float

    def to_dict(self) -> dict:
        return {
            "n_cells": self.n_cells,
            "n_errors": self.n_errors,
            "rmse": self.rmse,
            "error_rate": self.error_rate,
        }


@dataclass(frozen=True)
class NumericScores:
    levels: Mapping[str, LevelScores]

    def to_dict(self) -> dict:
        return {level: s.to_dict() for level, s in sorted(self.levels.items())}


@dataclass(frozen=True)
class ExampleScores:
    example_id: str
    match: Mapping[str, MatchScores] = field(default_factory=dict)
    numeric: Mapping[str, NumericScores] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "exact_match": {n: s.to_dict() for n, s in sorted(self.match.items())},
            "numeric": {n: s.to_dict() for n, s in sorted(self.numeric.items())},
        }


def exact_match_scores(pred: Table, gold: Table) -> MatchScores:
    """Precision/recall/F1 of predicted cell tuples against gold.

    Empty denominators score 0; two tables with no tuples at all count as a
    perfect match.
    """
    p = cell_tuples(pred)
    g = cell_tuples(gold)
    matched = len(p & g)
    if not p and not g:
        return MatchScores(1.0, 1.0, 1.0, 0, 0, 0)
    precision = matched / len(p) if p else 0.0
    recall = matched / len(g) if g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MatchScores(precision, recall, f1, len(p), len(g), matched)


def _parse_number(raw: str) -> float | None:
    s = normalize_cell(raw)
    if not s:
        return None
    try:
        return float(s)
    except ValueError:
        return None


def numeric_scores(
    pred: Table,
    gold: Table,
    difficulty: Mapping[str, str] | None = None,
) -> NumericScores:
    """RMSE and cell-level error rate over gold data cells, per difficulty level.

    With no difficulty map every data column lands in a single "all" level;
    with a map, only mapped columns are scored. Predicted cells align by
    normalized row and column header; missing or unparseable predictions
    impute 0 and count as errors.
    """
    pred_values: dict[tuple[str, str], str] = {}
    pred_cols = {normalize_cell(h): j for j, h in enumerate(pred.column_headers)}
    for row in pred.rows:
        rh = normalize_cell(row.cells[0])
        for header, j in pred_cols.items():
            if j == 0 or j >= len(row.cells):
                continue
            pred_values.setdefault((rh, header), row.cells[j])

    acc: dict[str, list[tuple[float, bool]]] = {}
    for j in range(1, gold.n_columns):
        header = gold.column_headers[j]
        level = difficulty.get(header) if difficulty is not None else "all"
        if level is None:
            continue
        norm_header = normalize_cell(header)
        for row in gold.rows:
            raw_gold = row.cells[j] if j < len(row.cells) else ""
            gold_norm = normalize_cell(raw_gold)
            try:
                gold_value = int(gold_norm)
            except ValueError as exc:
                raise GoldNotNumeric(
                    f"gold cell ({row.header!r}, {header!r}) = {raw_gold!r} is not an integer"
                ) from exc
            raw_pred = pred_values.get((normalize_cell(row.cells[0]), norm_header))
            pred_value = _parse_number(raw_pred) if raw_pred is not None else None
            if pred_value is None:
                acc.setdefault(level, []).append((float(0 - gold_value) ** 2, True))
            else:
                diff = pred_value - gold_value
                acc.setdefault(level, []).append((diff * diff, pred_value != gold_value))

    levels = {}
    for level, cells in acc.items():
        n = len(cells)
        sse = sum(sq for sq, _ in cells)
        n_errors = sum(1 for _, err in cells if err)
        levels[level] = LevelScores(
            n_cells=n,
            n_errors=n_errors,
            sse=sse,
            rmse=math.sqrt(sse / n),
            error_rate=100.0 * n_errors / n,
        )
    return NumericScores(levels=levels)


MATCH_AVERAGES = ("macro", "example")
NUMERIC_POOLINGS = ("micro", "per_example")


@dataclass
class EvalReport:
    """Per-example scores plus aggregates, serializable as one JSON document."""

    per_example: list[ExampleScores]
    match_by_table: dict[str, dict]
    headline_exact_match: float | None
    numeric_by_level: dict[str, dict]
    match_average: str
    numeric_pooling: str
    config: dict = field(default_factory=dict)
    ledger_totals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "exact_match": {
                "headline": self.headline_exact_match,
                "average": self.match_average,
                "by_table": self.match_by_table,
            },
            "numeric": {
                "pooling": self.numeric_pooling,
                "by_level": self.numeric_by_level,
            },
            "per_example": [s.to_dict() for s in self.per_example],
            "config": self.config,
            "ledger": self.ledger_totals,
        }


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def aggregate(
    per_example: Sequence[ExampleScores],
    *,
    match_average: str = "macro",
    numeric_pooling: str = "micro",
    config: dict | None = None,
    ledger_totals: dict | None = None,
) -> EvalReport:
    """Fold per-example scores into one report.

    macro: headline exact match is the unweighted mean of table-type means.
    example: mean over every (example, table) score.
    micro: numeric cells pool across examples before RMSE/ER; per_example
    averages each example's level scores instead.
    """
    if not per_example:
        raise ValueError("nothing to aggregate")
    if match_average not in MATCH_AVERAGES:
        raise ValueError(f"match_average must be one of {MATCH_AVERAGES}")
    if numeric_pooling not in NUMERIC_POOLINGS:
        raise ValueError(f"numeric_pooling must be one of {NUMERIC_POOLINGS}")

    by_table: dict[str, list[MatchScores]] = {}
    for ex in per_example:
        for name, scores in ex.match.items():
            by_table.setdefault(name, []).append(scores)
    match_by_table = {
        name: {
            "precision": _mean([s.precision for s in scores]),
            "recall": _mean([s.recall for s in scores]),
            "f1": _mean([s.f1 for s in scores]),
            "n_examples": len(scores),
        }
        for name, scores in sorted(by_table.items())
    }
    headline: float | None = None
    if match_by_table:
        if match_average == "macro":
            headline = _mean([v["f1"] for v in match_by_table.values()])
        else:
            headline = _mean(
                [s.f1 for scores in by_table.values() for s in scores]
            )

    numeric_by_level: dict[str, dict] = {}
    if numeric_pooling == "micro":
        pooled: dict[str, list[LevelScores]] = {}
        for ex in per_example:
            for scores in ex.numeric.values():
                for level, ls in scores.levels.items():
                    pooled.setdefault(level, []).append(ls)
        for level, parts in sorted(pooled.items()):
            n = sum(p.n_cells for p in parts)
            sse = sum(p.sse for p in parts)
            n_errors = sum(p.n_errors for p in parts)
            numeric_by_level[level] = {
                "n_cells": n,
                "n_errors": n_errors,
                "rmse": math.sqrt(sse / n) if n else 0.0,
                "error_rate": 100.0 * n_errors / n if n else 0.0,
            }
    else:
        collected: dict[str, list[LevelScores]] = {}
        for ex in per_example:
            for scores in ex.numeric.values():
                for level, ls in scores.levels.items():
                    collected.setdefault(level, []).append(ls)
        for level, parts in sorted(collected.items()):
            numeric_by_level[level] = {
                "n_cells": sum(p.n_cells for p in parts),
                "n_errors": sum(p.n_errors for p in parts),
                "rmse": _mean([p.rmse for p in parts]),
                "error_rate": _mean([p.error_rate for p in parts]),
            }

    return EvalReport(
        per_example=list(per_example),
        match_by_table=match_by_table,
        headline_exact_match=headline,
        numeric_by_level=numeric_by_level,
        match_average=match_average,
        numeric_pooling=numeric_pooling,
        config=dict(config or {}),
        ledger_totals=dict(ledger_totals or {}),
    )


_LEVEL_ORDER = {"easy": 0, "medium": 1, "hard": 2}


def format_report(report: EvalReport, label: str = "run") -> str:
    """One strategy row by metric columns, in the spirit of a results table."""
    headers = ["strategy", "exact_match"]
    levels = sorted(report.numeric_by_level, key=lambda lv: (_LEVEL_ORDER.get(lv, 99), lv))
    for level in levels:
        headers += [f"{level}_rmse", f"{level}_er"]
    em = "-" if report.headline_exact_match is None else f"{report.headline_exact_match:.4f}"
    row = [label, em]
    for level in levels:
        row += [
            f"{report.numeric_by_level[level]['rmse']:.3f}",
            f"{report.numeric_by_level[level]['error_rate']:.2f}",
        ]
    widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
    line1 = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    line2 = "  ".join(v.ljust(w) for v, w in zip(row, widths))
    return f"{line1}\n{line2}"
