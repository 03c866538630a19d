"""Pipe-grid table model and the parse / serialize / normalize / repair machinery.

The wire format is plain text: one header line, one line per row, cells
separated by the pipe character. All functions here are pure and operate on
immutable values, so they are safe to call from concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence


class EmptyInput(ValueError):
    """There was nothing to parse."""


class HeaderlessTable(ValueError):
    """The first grid line does not look like a header row."""


class UnrepairableTable(ValueError):
    """No parsed column header matches the expected schema."""


class InvalidTable(ValueError):
    """A table invariant is violated."""


@dataclass(frozen=True)
class Row:
    """One table row. ``cells[0]`` is the row-header cell (the entity name)."""

    cells: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.cells:
            raise InvalidTable("a row needs at least its header cell")

    @property
    def header(self) -> str:
        return self.cells[0]

    @property
    def data(self) -> tuple[str, ...]:
        return self.cells[1:]


@dataclass(frozen=True)
class Table:
    """A header line plus rows. ``name`` is a label and takes no part in equality."""

    column_headers: tuple[str, ...]
    rows: tuple[Row, ...] = ()
    name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "column_headers", tuple(self.column_headers))
        object.__setattr__(self, "rows", tuple(self.rows))

    @classmethod
    def from_lists(
        cls,
        column_headers: Sequence[str],
        rows: Sequence[Sequence[str]],
        name: str = "",
    ) -> "Table":
        return cls(tuple(column_headers), tuple(Row(tuple(r)) for r in rows), name=name)

    @property
    def n_columns(self) -> int:
        return len(self.column_headers)

    @property
    def n_data_columns(self) -> int:
        return max(len(self.column_headers) - 1, 0)

    @property
    def n_data_rows(self) -> int:
        return len(self.rows)

    @property
    def n_data_cells(self) -> int:
        return self.n_data_rows * self.n_data_columns

    def data_cells(self) -> Iterator[tuple[int, int, str]]:
        """Yield (row_index, column_index, value) for every data cell."""
        for i, row in enumerate(self.rows):
            for j in range(1, self.n_columns):
                yield i, j, row.cells[j] if j < len(row.cells) else ""

    def validate(self) -> None:
        """Raise InvalidTable unless every table invariant holds."""
        if not self.column_headers:
            raise InvalidTable("table has no column headers")
        for h in self.column_headers:
            if not h.strip():
                raise InvalidTable("column headers must be non-empty")
        normalized = [normalize_cell(h) for h in self.column_headers]
        if len(set(normalized)) != len(normalized):
            raise InvalidTable(f"column headers collide after normalization: {normalized}")
        for i, row in enumerate(self.rows):
            if len(row.cells) != self.n_columns:
                raise InvalidTable(
                    f"row {i} has {len(row.cells)} cells, expected {self.n_columns}"
                )
        for cells in (self.column_headers, *(r.cells for r in self.rows)):
            for c in cells:
                if "|" in c or "\n" in c:
                    raise InvalidTable(f"cell {c!r} contains a pipe or newline")


class CellTuple(NamedTuple):
    """Alignment unit for scoring: all three fields are normalization fixpoints."""

    row_header: str
    column_header: str
    value: str


def _is_separator(line: str) -> bool:
    # A markdown rule line like "|---|:--:|". Requires at least one dash so
    # that an all-empty data row (" | ") is not mistaken for a separator.
    stripped = line.strip()
    return "-" in stripped and all(ch in "-:| \t" for ch in stripped)


def split_cells(line: str) -> list[str]:
    """Split one grid line into stripped cells.

    A leading/trailing pipe pair (markdown style) is removed; a lone trailing
    pipe is kept as a cell boundary so serialized empty trailing cells survive
    the round trip.
    """
    stripped = line.strip()
    if len(stripped) >= 2 and stripped.startswith("|") and stripped.endswith("|"):
        body = stripped[1:-1]
    else:
        body = line
    return [c.strip() for c in body.split("|")]


def parse_grid(text: str, name: str = "") -> Table:
    """Parse pipe-grid text into a Table.

    The first non-blank, non-separator line becomes the column headers; each
    later line becomes a row. The result is not validated: ragged model output
    parses fine and is fixed up by repair_table.
    """
    if not text or not text.strip():
        raise EmptyInput("no non-blank lines to parse")
    lines = [ln for ln in text.splitlines() if ln.strip() and not _is_separator(ln)]
    if not lines:
        raise EmptyInput("only separator lines present")
    headers = split_cells(lines[0])
    if len(headers) < 2:
        raise HeaderlessTable(f"first line yields {len(headers)} cell(s): {lines[0]!r}")
    rows = tuple(Row(tuple(split_cells(ln))) for ln in lines[1:])
    return Table(tuple(headers), rows, name=name)


def serialize_grid(table: Table) -> str:
    """Render a Table as pipe-grid text: header line first, no outer pipes."""
    lines = [" | ".join(table.column_headers)]
    lines.extend(" | ".join(row.cells) for row in table.rows)
    return "\n".join(lines)


def normalize_cell(raw: str) -> str:
    """Canonicalize a cell for matching.

    Collapses whitespace, lowercases, strips one layer of surrounding quotes
    and one trailing percent sign per pass, repeating until stable so the
    result is always a fixpoint.
    """
    s = raw
    while True:
        t = " ".join(s.split()).lower()
        if len(t) >= 2 and t[0] == t[-1] and t[0] in ("'", '"'):
            t = t[1:-1]
        if t.endswith("%"):
            t = t[:-1]
        if t == s:
            return t
        s = t


def _sanitize(cell: str) -> str:
    if "|" in cell or "\n" in cell:
        cell = cell.replace("|", " ").replace("\n", " ").strip()
    return cell


def repair_table(parsed: Table, expected_columns: Sequence[str]) -> Table:
    """Coerce a parsed table onto the expected schema.

    Columns are re-mapped by normalized header equality (misordered columns are
    a more common failure than shifted cells); unmatched expected columns fill
    with empty cells, short rows pad, long rows truncate.
    """
    expected = tuple(expected_columns)
    if not expected:
        raise ValueError("expected_columns must be non-empty")
    norm_expected = [normalize_cell(c) for c in expected]
    if len(set(norm_expected)) != len(norm_expected):
        raise ValueError(f"expected_columns collide after normalization: {expected}")
    for c in expected:
        if not c.strip() or "|" in c or "\n" in c:
            raise ValueError(f"bad expected column header: {c!r}")

    norm_parsed = [normalize_cell(c) for c in parsed.column_headers]
    if norm_parsed == norm_expected:
        mapping: list[int | None] = list(range(len(expected)))
    else:
        used: set[int] = set()
        mapping = []
        for want in norm_expected:
            found = next(
                (i for i, have in enumerate(norm_parsed) if have == want and i not in used),
                None,
            )
            mapping.append(found)
            if found is not None:
                used.add(found)
        if not any(m is not None for m in mapping):
            raise UnrepairableTable(
                f"no parsed header in {list(parsed.column_headers)} matches {list(expected)}"
            )

    rows = []
    for row in parsed.rows:
        cells = tuple(
            _sanitize(row.cells[m]) if m is not None and m < len(row.cells) else ""
            for m in mapping
        )
        rows.append(Row(cells))
    return Table(expected, tuple(rows), name=parsed.name)


def cell_tuples(table: Table) -> set[CellTuple]:
    """One normalized tuple per non-empty data cell; duplicates collapse."""
    out: set[CellTuple] = set()
    for row in table.rows:
        row_header = normalize_cell(row.cells[0])
        for j in range(1, table.n_columns):
            if j >= len(row.cells):
                continue
            value = normalize_cell(row.cells[j])
            if value:
                out.add(CellTuple(row_header, normalize_cell(table.column_headers[j]), value))
    return out
