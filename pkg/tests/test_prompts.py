from __future__ import annotations

import pytest

from tabgen.backend import CallLedger
from tabgen.prompts import (
    EmptySchema,
    MissingShotExample,
    NoTableFound,
    PromptPlan,
    Strategy,
    StrategyKind,
    build_prompt,
    extract_table,
    run_generation,
)
from tabgen.corpus import TableTarget
from tabgen.table import Table, UnrepairableTable

from conftest import GOLDEN, SUBTASK_NAMES, CannedBackend, last_user


def render_plan(plan: PromptPlan) -> str:
    return "\n\n".join(f"[{m.role}]\n{m.content}" for m in plan.messages) + "\n"


def plan_text(plan: PromptPlan) -> str:
    return "\n".join(m.content for m in plan.messages)


@pytest.fixture()
def shot_and_example(rotowire_corpus):
    return rotowire_corpus[0], rotowire_corpus[1]


class TestBuildPrompt:
    @pytest.mark.parametrize("kind", list(StrategyKind))
    def test_matches_golden_file(self, kind, shot_and_example):
        shot, example = shot_and_example
        needs_shot = kind in (StrategyKind.ONE_SHOT, StrategyKind.ONE_SHOT_COT)
        strategy = Strategy(kind, shot_example=shot if needs_shot else None)
        plan = build_prompt(strategy, example, example.targets[0])
        golden = (GOLDEN / f"prompt_{kind.value}.txt").read_text(encoding="utf-8")
        assert render_plan(plan) == golden

    def test_deterministic(self, shot_and_example):
        _, example = shot_and_example
        strategy = Strategy(StrategyKind.SUBTASK_GUIDED)
        a = build_prompt(strategy, example, example.targets[0])
        b = build_prompt(strategy, example, example.targets[0])
        assert a.messages == b.messages

    def test_one_prompt_per_target_with_own_headers(self, rotowire_corpus):
        example = rotowire_corpus[2]
        strategy = Strategy(StrategyKind.ZERO_SHOT)
        plans = [build_prompt(strategy, example, t) for t in example.targets]
        assert len(plans) == 2
        for plan, target in zip(plans, example.targets):
            text = plan_text(plan)
            assert " | ".join(target.column_headers) in text
            assert ", ".join(target.row_headers) in text
            assert example.passage in text

    def test_subtask_names_once_in_order(self, shot_and_example):
        _, example = shot_and_example
        plan = build_prompt(Strategy(StrategyKind.SUBTASK_GUIDED), example, example.targets[0])
        text = plan_text(plan)
        positions = []
        for name in SUBTASK_NAMES:
            assert text.count(name) == 1, name
            positions.append(text.index(name))
        assert positions == sorted(positions)

    def test_other_strategies_have_no_subtask_list(self, shot_and_example):
        _, example = shot_and_example
        plan = build_prompt(Strategy(StrategyKind.ZERO_SHOT), example, example.targets[0])
        assert "Header Explanation" not in plan_text(plan)

    def test_cot_appends_instruction(self, shot_and_example):
        _, example = shot_and_example
        base = plan_text(build_prompt(Strategy(StrategyKind.ZERO_SHOT), example, example.targets[0]))
        cot = plan_text(
            build_prompt(Strategy(StrategyKind.ZERO_SHOT_COT), example, example.targets[0])
        )
        assert cot.startswith(base)
        assert "step by step" in cot.lower()

    def test_one_shot_embeds_gold(self, shot_and_example):
        shot, example = shot_and_example
        plan = build_prompt(
            Strategy(StrategyKind.ONE_SHOT, shot_example=shot), example, example.targets[0]
        )
        text = plan_text(plan)
        assert shot.passage in text
        assert "Marcus Vale | 28 | 7 | 5" in text

    def test_final_user_message_states_format(self, shot_and_example):
        _, example = shot_and_example
        for kind in StrategyKind:
            needs_shot = kind in (StrategyKind.ONE_SHOT, StrategyKind.ONE_SHOT_COT)
            shot = shot_and_example[0] if needs_shot else None
            plan = build_prompt(Strategy(kind, shot_example=shot), example, example.targets[0])
            final = plan.messages[-1]
            assert final.role == "user"
            assert "pipe character (|)" in final.content
            assert "FINAL TABLE" in final.content

    def test_missing_shot_example(self):
        with pytest.raises(MissingShotExample):
            Strategy(StrategyKind.ONE_SHOT)

    def test_shot_without_matching_gold(self, rotowire_corpus, livesum_corpus):
        strategy = Strategy(StrategyKind.ONE_SHOT, shot_example=livesum_corpus[0])
        example = rotowire_corpus[1]
        with pytest.raises(MissingShotExample):
            build_prompt(strategy, example, example.targets[0])  # Player not in livesum shot

    def test_empty_schema(self, shot_and_example):
        _, example = shot_and_example
        bare = TableTarget(name="X", column_headers=(), row_headers=("a",))
        with pytest.raises(EmptySchema):
            build_prompt(Strategy(StrategyKind.ZERO_SHOT), example, bare)

    def test_shot_on_non_shot_kind_rejected(self, rotowire_corpus):
        with pytest.raises(ValueError):
            Strategy(StrategyKind.ZERO_SHOT, shot_example=rotowire_corpus[0])


TARGET = TableTarget(name="T", column_headers=("A", "B"), row_headers=("x",))


class TestExtractTable:
    def test_sentinel_rule(self):
        table = extract_table("reasoning...\nFINAL TABLE:\nA | B\nx | y", TARGET)
        assert table == Table.from_lists(["A", "B"], [["x", "y"]])

    def test_last_block_without_sentinel(self):
        text = "A | B\nfirst | block\n\nsome prose\n\nA | B\nx | y"
        table = extract_table(text, TARGET)
        assert table.rows[0].cells == ("x", "y")

    def test_first_block_after_sentinel_wins(self):
        text = "draft:\nA | B\nx | y\n\nFINAL TABLE:\nA | B\nx | z\n\ntrailing | junk\nmore | junk"
        table = extract_table(text, TARGET)
        assert table.rows[0].cells == ("x", "z")

    def test_no_table(self):
        with pytest.raises(NoTableFound):
            extract_table("no table here", TARGET)
        with pytest.raises(NoTableFound):
            extract_table("", TARGET)

    def test_single_pipe_line_is_not_a_table(self):
        with pytest.raises(NoTableFound):
            extract_table("only one | line", TARGET)

    def test_sentinel_without_block_falls_back(self):
        text = "A | B\nx | y\n\nFINAL TABLE:\n(omitted)"
        table = extract_table(text, TARGET)
        assert table.rows[0].cells == ("x", "y")

    def test_separator_only_block(self):
        with pytest.raises(NoTableFound):
            extract_table("|---|---|\n|---|---|", TARGET)

    def test_unrepairable_propagates(self):
        with pytest.raises(UnrepairableTable):
            extract_table("FINAL TABLE:\nQ | R\n1 | 2", TARGET)

    def test_repairs_to_schema(self):
        table = extract_table("FINAL TABLE:\nB | A\n1 | 2", TARGET)
        assert table.column_headers == ("A", "B")
        assert table.rows[0].cells == ("2", "1")


class TestRunGeneration:
    def test_single_call(self, rotowire_corpus):
        example = rotowire_corpus[0]
        target = example.targets[1]  # Team
        backend = CannedBackend(lambda r: "FINAL TABLE:\nTeam | Points | Wins | Losses\nHawks | 1 | 2 | 3")
        ledger = CallLedger()
        result = run_generation(example, target, Strategy(StrategyKind.ZERO_SHOT), backend, ledger)
        assert result.n_calls == 1 and len(ledger) == 1
        assert ledger.entries[0].stage_label == "generate"
        assert result.table.column_headers == target.column_headers

    def test_re_ask_after_prose(self, rotowire_corpus):
        example = rotowire_corpus[0]
        target = example.targets[1]

        def reply(request):
            if "did not contain a readable table" in last_user(request):
                return "FINAL TABLE:\nTeam | Points | Wins | Losses\nHawks | 9 | 9 | 9"
            return "I am not sure what to do."

        ledger = CallLedger()
        result = run_generation(
            example, target, Strategy(StrategyKind.ZERO_SHOT), CannedBackend(reply), ledger
        )
        assert result.n_calls == 2 and len(ledger) == 2
        assert [e.stage_label for e in ledger.entries] == ["generate", "re-ask"]
        assert result.table.rows[0].cells == ("Hawks", "9", "9", "9")

    def test_prose_twice_fails_with_two_calls(self, rotowire_corpus):
        example = rotowire_corpus[0]
        target = example.targets[1]
        ledger = CallLedger()
        with pytest.raises(NoTableFound):
            run_generation(
                example,
                target,
                Strategy(StrategyKind.ZERO_SHOT),
                CannedBackend(lambda r: "still prose"),
                ledger,
            )
        assert len(ledger) == 2
