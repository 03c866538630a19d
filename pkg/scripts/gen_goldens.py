"""Regenerate the committed golden prompt files under tests/golden/.

Renders every strategy for mini-corpus example rw-002 (Player table) with
rw-001 as the 1-shot example. Rerun after intentionally changing templates,
then review the diff:

    python scripts/gen_goldens.py
"""

from __future__ import annotations

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from tabgen.corpus import load_corpus, mini_corpus_path
from tabgen.prompts import PromptPlan, Strategy, StrategyKind, build_prompt

GOLDEN = ROOT / "tests" / "golden"


def render_plan(plan: PromptPlan) -> str:
    return "\n\n".join(f"[{m.role}]\n{m.content}" for m in plan.messages) + "\n"


def main() -> None:
    GOLDEN.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(mini_corpus_path("rotowire"), "rotowire")
    shot, example = corpus[0], corpus[1]
    target = example.targets[0]  # Player
    for kind in StrategyKind:
        shot_arg = shot if kind in (StrategyKind.ONE_SHOT, StrategyKind.ONE_SHOT_COT) else None
        plan = build_prompt(Strategy(kind, shot_example=shot_arg), example, target)
        path = GOLDEN / f"prompt_{kind.value}.txt"
        path.write_text(render_plan(plan), encoding="utf-8")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
