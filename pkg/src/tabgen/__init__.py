"""tabgen: LLM text-to-table generation with sub-task prompting, iterative
self-refinement, and an offline-testable evaluation harness."""

from .table import (
    CellTuple,
    Row,
    Table,
    cell_tuples,
    normalize_cell,
    parse_grid,
    repair_table,
    serialize_grid,
)

__version__ = "0.1.0"

__all__ = [
    "CellTuple",
    "Row",
    "Table",
    "cell_tuples",
    "normalize_cell",
    "parse_grid",
    "repair_table",
    "serialize_grid",
    "__version__",
]
