import json
import os
import subprocess
import sys

import pytest

from promptarm.cli import main


def write_fixture_files(tmp_path, n_letters=4):
    corpus = tmp_path / "corpus.ndjson"
    with open(corpus, "w") as f:
        for i in range(n_letters):
            row = {
                "id": f"L{i:03d}",
                "text": (
                    f"Topic number {i} deserves careful attention. "
                    f"The plan has a flaw in section {i}. "
                    f"We urge adoption of option {i}. "
                    f"Wildlife near site {i} needs protection."
                ),
                "metadata": {"source": "fixture"},
            }
            f.write(json.dumps(row) + "\n")
    guidance = tmp_path / "guidance.json"
    guidance.write_text(
        json.dumps(
            {
                "bins": [
                    {"name": "wildlife", "guidance": "Impacts on wildlife"},
                    {"name": "alternatives", "guidance": "Preferences among options"},
                ]
            }
        )
    )
    config = tmp_path / "run.json"
    config.write_text(
        json.dumps(
            {
                "corpus_path": str(corpus),
                "guidance_path": str(guidance),
                "run_id": "cli-run",
                "batch_size": 10,
                "workers": 2,
                "max_iters": 2,
            }
        )
    )
    return config


class TestDemoCommand:
    def test_trace_files_byte_identical_across_runs(self, tmp_path):
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        for out in (out1, out2):
            main(
                [
                    "demo-bandit",
                    "--trials", "100",
                    "--seed", "7",
                    "--out", str(out),
                    "--no-plots",
                ]
            )
        for name in ("losses.csv", "selections.csv", "arms.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_plots_emitted(self, tmp_path):
        out = tmp_path / "demo"
        main(["demo-bandit", "--trials", "30", "--seed", "1", "--out", str(out)])
        assert (out / "loss-vs-trial.png").exists()
        assert (out / "selection-vs-trial.png").exists()


class TestRunCommand:
    def test_run_writes_report(self, tmp_path, capsys):
        config = write_fixture_files(tmp_path)
        db = tmp_path / "audit.db"
        report_path = tmp_path / "report.json"
        main(["--db", str(db), "run", "--config", str(config), "--report", str(report_path)])
        report = json.loads(report_path.read_text())
        assert report["run_id"] == "cli-run"
        assert len(report["letters"]) == 4
        assert all(e["quote_spans"] for e in report["letters"])
        out = capsys.readouterr().out
        assert "1 batch(es) complete" in out

    def test_missing_guidance_exits_2(self, tmp_path, capsys):
        config = tmp_path / "run.json"
        config.write_text(
            json.dumps({"corpus_path": "nope.ndjson", "guidance_path": "missing.json"})
        )
        with pytest.raises(SystemExit) as exc:
            main(["run", "--config", str(config)])
        assert exc.value.code == 2
        err = capsys.readouterr().err
        assert "nope.ndjson" in err

    def test_missing_config_exits_2(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--config", str(tmp_path / "none.json")])
        assert exc.value.code == 2
        assert "none.json" in capsys.readouterr().err


class TestEvalCommand:
    def test_eval_on_synthetic_fixture_matches_oracle(self, tmp_path, capsys):
        # run the pipeline first to produce a system report
        config = write_fixture_files(tmp_path)
        db = tmp_path / "audit.db"
        report_path = tmp_path / "report.json"
        main(["--db", str(db), "run", "--config", str(config), "--report", str(report_path)])
        report = json.loads(report_path.read_text())

        # ground truth marking the first quote span of each letter, bin wildlife
        truth_path = tmp_path / "truth.ndjson"
        with open(truth_path, "w") as f:
            for entry in report["letters"]:
                span = entry["quote_spans"][0]
                f.write(
                    json.dumps(
                        {
                            "letter_id": entry["letter_id"],
                            "start": span["start"],
                            "end": span["end"],
                            "bin_name": "wildlife",
                        }
                    )
                    + "\n"
                )
        out_dir = tmp_path / "eval"
        main(
            [
                "eval",
                "--system-output", str(report_path),
                "--truth", str(truth_path),
                "--out", str(out_dir),
            ]
        )
        eval_report = json.loads((out_dir / "eval-report.json").read_text())
        # brute-force oracle: every reviewer-marked sentence is quoted -> recall 1
        assert eval_report["aggregate"]["quote_recall"] == 1.0
        assert (out_dir / "eval-report.txt").exists()

    def test_missing_truth_exits_2(self, tmp_path):
        report_path = tmp_path / "r.json"
        report_path.write_text(json.dumps({"run_id": "r", "letters": [], "batches": []}))
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--system-output", str(report_path), "--truth", "none.ndjson"])
        assert exc.value.code == 2


class TestTraceCommand:
    def test_renders_chain(self, tmp_path, capsys):
        config = write_fixture_files(tmp_path, n_letters=2)
        db = tmp_path / "audit.db"
        main(["--db", str(db), "run", "--config", str(config)])
        from promptarm.store import AuditStore

        store = AuditStore(str(db))
        rows = store.stage_outputs("cli-run-b000", "bin_summary")
        capsys.readouterr()
        main(["--db", str(db), "trace", "--invocation", rows[0]["invocation_id"]])
        out = capsys.readouterr().out
        assert "[ingest]" in out
        assert "[bin_summary]" in out

    def test_unknown_invocation_exits_2(self, tmp_path):
        db = tmp_path / "audit.db"
        from promptarm.store import AuditStore

        AuditStore(str(db)).close()
        with pytest.raises(SystemExit) as exc:
            main(["--db", str(db), "trace", "--invocation", "zzz"])
        assert exc.value.code == 2
