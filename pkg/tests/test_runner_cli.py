from __future__ import annotations

import json
from pathlib import Path

import pytest

from tabgen.cli import main
from tabgen.corpus import mini_corpus_path
from tabgen.runner import (
    ConfigInvalid,
    CorpusUnloadable,
    ExperimentConfig,
    IdMismatch,
    evaluate_predictions,
    run_experiment,
)
from tabgen.table import EmptyInput, parse_grid

from conftest import FIXTURES
from stub_server import StubLLMServer, gold_reply_fn

ROTOWIRE = str(mini_corpus_path("rotowire"))
LIVESUM = str(mini_corpus_path("livesum"))
RW_TRANSCRIPT = str(FIXTURES / "replay_rotowire_cell2.jsonl")
LS_TRANSCRIPT = str(FIXTURES / "replay_livesum_cell2.jsonl")


def rw_config(tmp_path, **overrides):
    values = dict(
        corpus=ROTOWIRE,
        schema="rotowire",
        strategy="subtask_guided",
        feedback_level="cell",
        max_iterations=2,
        backend="replay",
        transcript=RW_TRANSCRIPT,
        out=str(tmp_path / "runs"),
    )
    values.update(overrides)
    return ExperimentConfig.from_dict(values)


class TestConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigInvalid, match="unknown config keys"):
            ExperimentConfig.from_dict({"corpsu": "x"})

    def test_replay_needs_transcript(self):
        with pytest.raises(ConfigInvalid, match="transcript"):
            ExperimentConfig.from_dict({"corpus": "c", "backend": "replay"}).validate()

    def test_http_needs_endpoint_and_model(self):
        with pytest.raises(ConfigInvalid, match="endpoint"):
            ExperimentConfig.from_dict(
                {"corpus": "c", "backend": "http", "model": ""}
            ).validate()

    def test_one_shot_needs_shot_id(self, tmp_path):
        config = rw_config(tmp_path, strategy="one_shot")
        with pytest.raises(ConfigInvalid, match="shot_example_id"):
            config.validate()

    def test_bad_strategy(self, tmp_path):
        with pytest.raises(ConfigInvalid, match="strategy"):
            rw_config(tmp_path, strategy="few_shot").validate()

    def test_config_file_and_flag_overrides(self, tmp_path):
        config_path = tmp_path / "c.json"
        config_path.write_text(json.dumps({"corpus": ROTOWIRE, "workers": 3}))
        code = main(
            [
                "run",
                "--config",
                str(config_path),
                "--schema",
                "rotowire",
                "--backend",
                "replay",
                "--transcript",
                RW_TRANSCRIPT,
                "--strategy",
                "subtask_guided",
                "--feedback-level",
                "cell",
                "--max-iterations",
                "2",
                "--workers",
                "1",
                "--out",
                str(tmp_path / "runs"),
            ]
        )
        assert code == 0
        manifest = json.loads(next((tmp_path / "runs").glob("*/manifest.json")).read_text())
        assert manifest["config"]["workers"] == 1  # flag beat the file value


class TestRunExperiment:
    def test_replay_run_all_ok(self, tmp_path):
        result = run_experiment(rw_config(tmp_path))
        assert result.manifest.n_ok == 5 and result.manifest.n_failed == 0
        assert result.manifest.ledger_totals["n_calls"] == 113
        for artifact in result.manifest.artifacts.values():
            assert Path(artifact).exists()
        report = json.loads(Path(result.manifest.artifacts["report"]).read_text())
        assert report["exact_match"]["headline"] == 1.0
        assert report["ledger"]["n_calls"] == 113

    def test_manifest_completeness(self, tmp_path):
        result = run_experiment(rw_config(tmp_path, limit=3))
        assert len(result.manifest.examples) == 3
        assert result.manifest.n_ok + result.manifest.n_failed == 3

    def test_reports_byte_identical_and_dirs_fresh(self, tmp_path):
        first = run_experiment(rw_config(tmp_path))
        second = run_experiment(rw_config(tmp_path))
        assert first.out_dir != second.out_dir
        a = Path(first.manifest.artifacts["report"]).read_bytes()
        b = Path(second.manifest.artifacts["report"]).read_bytes()
        assert a == b

    def test_workers_do_not_change_report(self, tmp_path):
        seq = run_experiment(rw_config(tmp_path, workers=1))
        par = run_experiment(rw_config(tmp_path, workers=4))
        assert (
            Path(seq.manifest.artifacts["report"]).read_bytes()
            == Path(par.manifest.artifacts["report"]).read_bytes()
        )

    def test_missing_script_isolates_example(self, tmp_path):
        # drop one example's recorded calls: it fails, the others still pass
        kept = [
            line
            for line in Path(RW_TRANSCRIPT).read_text().splitlines()
            if json.loads(line)["example_id"] != "rw-003"
        ]
        partial = tmp_path / "partial.jsonl"
        partial.write_text("\n".join(kept) + "\n")
        result = run_experiment(rw_config(tmp_path, transcript=str(partial)))
        statuses = {e["id"]: e["status"] for e in result.manifest.examples}
        assert statuses["rw-003"] == "failed"
        assert [s for i, s in statuses.items() if i != "rw-003"] == ["ok"] * 4
        failed = next(e for e in result.manifest.examples if e["id"] == "rw-003")
        assert "MissingScript" in failed["cause"]

    def test_predictions_round_trip_through_evaluate(self, tmp_path):
        result = run_experiment(rw_config(tmp_path))
        report = evaluate_predictions(
            result.manifest.artifacts["predictions"], ROTOWIRE, "rotowire"
        )
        assert report.headline_exact_match == pytest.approx(
            result.report.headline_exact_match
        )

    def test_livesum_replay_numeric_report(self, tmp_path):
        config = ExperimentConfig.from_dict(
            dict(
                corpus=LIVESUM,
                schema="livesum",
                strategy="zero_shot",
                feedback_level="cell",
                max_iterations=2,
                backend="replay",
                transcript=LS_TRANSCRIPT,
                out=str(tmp_path / "runs"),
            )
        )
        result = run_experiment(config)
        assert result.manifest.n_ok == 5
        assert result.manifest.ledger_totals["n_calls"] == 101
        assert set(result.report.numeric_by_level) == {"easy", "medium", "hard"}
        for level in result.report.numeric_by_level.values():
            assert level["rmse"] == 0.0 and level["error_rate"] == 0.0

    def test_trace_records_planted_correction(self, tmp_path):
        result = run_experiment(rw_config(tmp_path))
        lines = [
            json.loads(l)
            for l in Path(result.manifest.artifacts["trace"]).read_text().splitlines()
        ]
        revisions = [l for l in lines if l["verdict"] == "revise"]
        assert len(revisions) == 1
        assert revisions[0]["example_id"] == "rw-001"
        assert revisions[0]["old_value"] == "30" and revisions[0]["new_value"] == "31"

    def test_example_filter(self, tmp_path):
        result = run_experiment(rw_config(tmp_path, example_ids=["rw-002", "rw-005"]))
        assert [e["id"] for e in result.manifest.examples] == ["rw-002", "rw-005"]

    def test_unknown_example_filter(self, tmp_path):
        with pytest.raises(ConfigInvalid, match="example_ids"):
            run_experiment(rw_config(tmp_path, example_ids=["nope"]))

    def test_corpus_unloadable(self, tmp_path):
        with pytest.raises(CorpusUnloadable):
            run_experiment(rw_config(tmp_path, corpus=str(tmp_path / "missing.jsonl")))

    def test_one_shot_http_run(self, tmp_path, rotowire_corpus):
        with StubLLMServer(gold_reply_fn(rotowire_corpus)) as server:
            config = rw_config(
                tmp_path,
                strategy="one_shot",
                shot_example_id="rw-001",
                feedback_level=None,
                backend="http",
                endpoint=server.endpoint,
                model="stub-model",
                transcript=None,
            )
            result = run_experiment(config)
        assert result.manifest.n_ok == 5
        assert result.report.headline_exact_match == 1.0

    def test_http_run_and_replay_closure(self, tmp_path, rotowire_corpus):
        with StubLLMServer(gold_reply_fn(rotowire_corpus)) as server:
            http_config = rw_config(
                tmp_path,
                strategy="zero_shot",
                feedback_level=None,
                backend="http",
                endpoint=server.endpoint,
                model="stub-model",
                transcript=None,
                workers=2,
            )
            live = run_experiment(http_config)
        assert live.manifest.n_ok == 5
        replay_config = rw_config(
            tmp_path,
            strategy="zero_shot",
            feedback_level=None,
            backend="replay",
            transcript=live.manifest.artifacts["transcript"],
            model="stub-model",
        )
        offline = run_experiment(replay_config)
        assert offline.manifest.n_ok == 5
        assert (
            Path(live.manifest.artifacts["report"]).read_bytes()
            == Path(offline.manifest.artifacts["report"]).read_bytes()
        )


class TestEvaluate:
    def test_fixture_headline(self):
        report = evaluate_predictions(
            FIXTURES / "eval_predictions.jsonl", FIXTURES / "eval_corpus.jsonl"
        )
        assert report.headline_exact_match == pytest.approx((4 / 7 + 0.75) / 2)

    def test_identity_predictions_score_one(self, tmp_path, rotowire_corpus):
        predictions = tmp_path / "p.jsonl"
        from tabgen.table import serialize_grid

        with open(predictions, "w") as fh:
            for example in rotowire_corpus:
                for target in example.targets:
                    fh.write(
                        json.dumps(
                            {
                                "id": example.id,
                                "name": target.name,
                                "grid": serialize_grid(target.gold),
                            }
                        )
                        + "\n"
                    )
        report = evaluate_predictions(predictions, ROTOWIRE, "rotowire")
        assert report.headline_exact_match == 1.0

    def test_empty_predictions_rejected(self, tmp_path):
        empty = tmp_path / "p.jsonl"
        empty.write_text("")
        with pytest.raises(EmptyInput):
            evaluate_predictions(empty, FIXTURES / "eval_corpus.jsonl")

    def test_unknown_id_rejected(self, tmp_path):
        bad = tmp_path / "p.jsonl"
        bad.write_text(json.dumps({"id": "ghost", "name": "Team", "grid": "A | B\n1 | 2"}) + "\n")
        with pytest.raises(IdMismatch):
            evaluate_predictions(bad, FIXTURES / "eval_corpus.jsonl")

    def test_missing_prediction_scores_zero(self, tmp_path):
        only_one = tmp_path / "p.jsonl"
        only_one.write_text(
            json.dumps(
                {"id": "e1", "name": "Team", "grid": "Team | Wins\nHawks | 30\nBulls | 22"}
            )
            + "\n"
        )
        report = evaluate_predictions(only_one, FIXTURES / "eval_corpus.jsonl")
        by_example = {s.example_id: s for s in report.per_example}
        assert by_example["e1"].match["Player"].f1 == 0.0
        assert by_example["e1"].match["Team"].f1 == 1.0


class TestCli:
    def test_run_exit_zero(self, tmp_path, capsys):
        code = main(
            [
                "run",
                "--corpus",
                ROTOWIRE,
                "--schema",
                "rotowire",
                "--strategy",
                "subtask_guided",
                "--feedback-level",
                "cell",
                "--backend",
                "replay",
                "--transcript",
                RW_TRANSCRIPT,
                "--out",
                str(tmp_path / "runs"),
            ]
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "5 ok, 0 failed" in out
        assert "subtask_guided+cellx2" in out

    def test_run_exit_one_on_failure(self, tmp_path):
        kept = [
            line
            for line in Path(RW_TRANSCRIPT).read_text().splitlines()
            if json.loads(line)["example_id"] != "rw-001"
        ]
        partial = tmp_path / "partial.jsonl"
        partial.write_text("\n".join(kept) + "\n")
        code = main(
            [
                "run",
                "--corpus",
                ROTOWIRE,
                "--schema",
                "rotowire",
                "--strategy",
                "subtask_guided",
                "--feedback-level",
                "cell",
                "--backend",
                "replay",
                "--transcript",
                str(partial),
                "--out",
                str(tmp_path / "runs"),
            ]
        )
        assert code == 1

    def test_run_config_error_exit_two(self, tmp_path, capsys):
        code = main(["run", "--corpus", ROTOWIRE, "--backend", "replay"])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_evaluate_writes_report(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(
            [
                "evaluate",
                "--predictions",
                str(FIXTURES / "eval_predictions.jsonl"),
                "--corpus",
                str(FIXTURES / "eval_corpus.jsonl"),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["exact_match"]["headline"] == pytest.approx(37 / 56)

    def test_stats_prints_and_writes(self, tmp_path, capsys):
        out = tmp_path / "stats.json"
        code = main(["stats", "--corpus", LIVESUM, "--schema", "livesum", "--out", str(out)])
        assert code == 0
        printed = capsys.readouterr().out
        assert "avg passage tokens: 116.40" in printed
        assert "avg rows 2.00, avg cols 8.00" in printed
        payload = json.loads(out.read_text())
        assert payload["tables"]["Team"]["avg_nonempty_cells"] == 16.0

    def test_replay_check(self, capsys):
        code = main(
            [
                "replay-check",
                "--corpus",
                ROTOWIRE,
                "--schema",
                "rotowire",
                "--strategy",
                "subtask_guided",
                "--feedback-level",
                "cell",
                "--backend",
                "replay",
                "--transcript",
                RW_TRANSCRIPT,
            ]
        )
        assert code == 0
        assert "byte-identical" in capsys.readouterr().out

    def test_predictions_are_schema_conformant(self, tmp_path, rotowire_corpus):
        result = run_experiment(rw_config(tmp_path))
        targets = {
            (e.id, t.name): t for e in rotowire_corpus for t in e.targets
        }
        lines = Path(result.manifest.artifacts["predictions"]).read_text().splitlines()
        assert len(lines) == 10
        for line in lines:
            obj = json.loads(line)
            table = parse_grid(obj["grid"])
            table.validate()
            assert table.column_headers == targets[(obj["id"], obj["name"])].column_headers
