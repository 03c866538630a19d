"""Regenerate the committed replay-transcript fixtures under tests/fixtures/.

Runs the real pipeline against a rule-based stand-in model and records the
transcript; the committed files then drive offline replay tests. Rerun after
changing prompt templates:

    python scripts/gen_fixtures.py
"""

from __future__ import annotations

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from tabgen.backend import CallLedger, ChatRequest, ChatResponse, ModelSettings, TranscriptWriter
from tabgen.corpus import ExperimentExample, load_corpus, mini_corpus_path
from tabgen.prompts import Strategy, StrategyKind, run_generation
from tabgen.refine import FeedbackGranularity, RefinementConfig, refine
from tabgen.table import Table, serialize_grid

FIXTURES = ROOT / "tests" / "fixtures"

# deliberate generation mistakes the cell feedback then corrects:
# (example id, table name, row header, column header) -> wrong value
PLANTED_ERRORS = {
    ("rw-001", "Player", "Dexter Cole", "Points"): "30",
    ("ls-001", "Team", "Away Team", "Shots"): "1",
}
# examples whose first generation reply is table-free prose, forcing a re-ask
PROSE_FIRST = {("rw-004", "Player")}


class RuleModel:
    """Deterministic stand-in model: answers from gold tables plus the
    planted mistakes above."""

    def __init__(self, corpus: list[ExperimentExample]):
        self.corpus = corpus
        self.prose_served: set[tuple[str, str]] = set()

    def _locate(self, text: str) -> tuple[ExperimentExample, str]:
        example = next(e for e in self.corpus if e.passage in text)
        name = next(t.name for t in example.targets if f'"{t.name}"' in text)
        return example, name

    def _generated_table(self, example: ExperimentExample, name: str) -> Table:
        target = next(t for t in example.targets if t.name == name)
        assert target.gold is not None
        cells = [list(r.cells) for r in target.gold.rows]
        for (ex_id, tbl, row_header, column), wrong in PLANTED_ERRORS.items():
            if ex_id == example.id and tbl == name:
                i = [r[0] for r in cells].index(row_header)
                j = list(target.gold.column_headers).index(column)
                cells[i][j] = wrong
        return Table.from_lists(target.gold.column_headers, cells, name=name)

    def send(self, request: ChatRequest) -> ChatResponse:
        text = "\n".join(m.content for m in request.messages)
        example, name = self._locate(text)
        if "Verify a single cell" in text:
            reply = self._cell_verdict(text, example, name)
        else:
            key = (example.id, name)
            if key in PROSE_FIRST and key not in self.prose_served:
                self.prose_served.add(key)
                reply = (
                    "The passage describes a basketball game between two teams. "
                    "I will need to read it carefully before writing anything down."
                )
            else:
                grid = serialize_grid(self._generated_table(example, name))
                reply = f"Working through the passage as instructed.\n\nFINAL TABLE:\n{grid}"
        tokens_in = sum(len(m.content.split()) for m in request.messages)
        return ChatResponse(reply, tokens_in=tokens_in, tokens_out=len(reply.split()), latency_ms=7)

    def _cell_verdict(self, text: str, example: ExperimentExample, name: str) -> str:
        fields = {}
        for line in text.splitlines():
            for key in ("Row header", "Column header", "Generated value"):
                if line.startswith(f"{key}:"):
                    fields[key] = line.split(":", 1)[1].strip()
        target = next(t for t in example.targets if t.name == name)
        assert target.gold is not None
        row = next(r for r in target.gold.rows if r.header == fields["Row header"])
        j = list(target.gold.column_headers).index(fields["Column header"])
        gold_value = row.cells[j]
        if fields.get("Generated value", "") == gold_value:
            return "KEEP"
        return f"VALUE: {gold_value}"


def generate(schema: str, strategy_kind: StrategyKind, out_name: str) -> None:
    corpus = load_corpus(mini_corpus_path(schema), schema)
    model = RuleModel(corpus)
    ledger = CallLedger()
    out_path = FIXTURES / out_name
    out_path.unlink(missing_ok=True)
    transcript = TranscriptWriter(out_path)
    settings = ModelSettings()
    strategy = Strategy(strategy_kind)
    config = RefinementConfig(FeedbackGranularity.CELL, max_iterations=2)
    for example in corpus:
        for target in example.targets:
            generated = run_generation(
                example, target, strategy, model, ledger, settings=settings, transcript=transcript
            )
            refine(
                example.passage,
                generated.table,
                target,
                config,
                model,
                ledger,
                settings=settings,
                example_id=example.id,
                transcript=transcript,
            )
    print(f"{out_name}: {len(ledger)} calls recorded")


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    generate("rotowire", StrategyKind.SUBTASK_GUIDED, "replay_rotowire_cell2.jsonl")
    generate("livesum", StrategyKind.ZERO_SHOT, "replay_livesum_cell2.jsonl")


if __name__ == "__main__":
    main()
