import json

import pytest

from bell import cli, pipeline
from bell.core import TechniqueKind
from bell.elicit import run_technique

from conftest import make_config_dict, make_run_config

PUBLISHED_ROWS = """model,cot,thot,reread_cot,reread_thot,cove,hallucination,model_score
GPT-4,85.28,92.39,91.91,91.37,85.14,19.42,87.78
Gemma-2 9B,72.91,91.73,90.41,91.8,83.08,25.07,84.15
Mistral 7B,79.93,90.34,79.94,89.71,88.33,26.4,83.64
Llama-3.2 3B,76.95,88.7,88.76,86.8,82.21,31.96,81.91
Llava-1.6 7B,58.81,86.87,85.93,87.95,82.13,25.1,79.43
Nemotron-mini-4B-instruct,79.79,75.44,74.94,78.37,78.46,26.4,76.95
Llama-3.2 1B,75.7,83.19,84.03,83.19,67.51,34.33,76.55
"""


def _write_config(tmp_path, dataset_path, out_dir, techniques=("cot", "cove")):
    config_path = tmp_path / "run.json"
    config_path.write_text(
        json.dumps(make_config_dict(dataset_path, out_dir, techniques)), encoding="utf-8"
    )
    return config_path


class TestCmdRun:
    def test_happy_path_exit_zero(self, tmp_path, dataset_path, capsys):
        config_path = _write_config(tmp_path, dataset_path, tmp_path / "out")
        code = cli.main(["run", "-c", str(config_path)])
        captured = capsys.readouterr()
        assert code == cli.EXIT_OK
        assert "| Model |" in captured.out
        assert (tmp_path / "out" / "scorecard.csv").exists()

    def test_missing_judge_profile_exit_one(self, tmp_path, dataset_path, capsys):
        raw = make_config_dict(dataset_path, tmp_path / "out")
        del raw["profiles"]["judge"]
        config_path = tmp_path / "bad.json"
        config_path.write_text(json.dumps(raw), encoding="utf-8")
        code = cli.main(["run", "-c", str(config_path)])
        assert code == cli.EXIT_FATAL
        assert "judge" in capsys.readouterr().err

    def test_invalid_json_config_positioned(self, tmp_path, capsys):
        config_path = tmp_path / "broken.json"
        config_path.write_text('{"dataset": ', encoding="utf-8")
        code = cli.main(["run", "-c", str(config_path)])
        assert code == cli.EXIT_FATAL
        assert "line" in capsys.readouterr().err

    def test_partial_run_exit_two_lists_failed_id(
        self, tmp_path, dataset_path, capsys, monkeypatch
    ):
        def flaky(backend, profile, record, technique, config):
            if record.id == "q04":
                raise RuntimeError("boom")
            return run_technique(backend, profile, record, technique, config)

        monkeypatch.setattr(pipeline.elicit, "run_technique", flaky)
        config_path = _write_config(tmp_path, dataset_path, tmp_path / "out", ("cot",))
        code = cli.main(["run", "-c", str(config_path)])
        captured = capsys.readouterr()
        assert code == cli.EXIT_PARTIAL
        assert "q04" in captured.out

    def test_technique_override(self, tmp_path, dataset_path, capsys):
        config_path = _write_config(tmp_path, dataset_path, tmp_path / "out")
        code = cli.main(["run", "-c", str(config_path), "--techniques", "cot"])
        assert code == cli.EXIT_OK
        card = json.loads((tmp_path / "out" / "scorecard.json").read_text())
        assert list(card["per_technique"]) == ["cot"]


class TestCmdReport:
    @pytest.fixture
    def run_dir(self, tmp_path, dataset_path):
        config = make_run_config(tmp_path, dataset_path, (TechniqueKind.COT, TechniqueKind.COVE))
        return pipeline.run(config).out_dir

    def test_csv_header(self, run_dir, capsys):
        assert cli.main(["report", str(run_dir), "--format", "csv"]) == cli.EXIT_OK
        header = capsys.readouterr().out.splitlines()[0]
        assert header == "model,cot,thot,reread_cot,reread_thot,cove,hallucination,model_score"

    def test_repeated_report_is_byte_identical(self, run_dir, capsys):
        cli.main(["report", str(run_dir), "--format", "csv"])
        first = (run_dir / "scorecard.csv").read_bytes()
        cli.main(["report", str(run_dir), "--format", "csv"])
        assert (run_dir / "scorecard.csv").read_bytes() == first

    def test_chart_emits_one_series_per_model(self, run_dir, capsys):
        assert cli.main(["report", str(run_dir), "--format", "chart"]) == cli.EXIT_OK
        charts = list((run_dir / "charts").glob("*.json"))
        assert len(charts) == 1
        series = json.loads(charts[0].read_text())
        assert series["labels"][-1] == "hallucination"
        assert len(series["labels"]) == len(series["values"])

    def test_json_format(self, run_dir, capsys):
        assert cli.main(["report", str(run_dir), "--format", "json"]) == cli.EXIT_OK
        payload = json.loads(capsys.readouterr().out)
        assert payload["model_id"] == "scripted-model"

    def test_missing_manifest_exit_one(self, tmp_path, capsys):
        assert cli.main(["report", str(tmp_path / "nowhere")]) == cli.EXIT_FATAL

    def test_incomplete_run_exit_two_with_pending_count(
        self, tmp_path, dataset_path, capsys
    ):
        config = make_run_config(tmp_path, dataset_path, (TechniqueKind.COT,), out_name="part")
        pipeline.run(config, max_tasks=3)
        code = cli.main(["report", config.out_dir, "--format", "csv"])
        captured = capsys.readouterr()
        assert code == cli.EXIT_PARTIAL
        assert "pending" in captured.err


class TestCmdScore:
    def test_published_rows_reproduced(self, tmp_path, capsys):
        table = tmp_path / "table.csv"
        table.write_text(PUBLISHED_ROWS, encoding="utf-8")
        code = cli.main(["score", str(table)])
        captured = capsys.readouterr()
        assert code == cli.EXIT_OK
        rows = {line.split(",")[0]: line.split(",") for line in captured.out.splitlines()[1:]}
        assert rows["GPT-4"][-1] == "87.78"
        assert rows["Llama-3.2 1B"][-1] == "76.55"
        assert rows["Mistral 7B"][-1] == "83.64"

    def test_anomalous_row_flagged(self, tmp_path, capsys):
        table = tmp_path / "table.csv"
        table.write_text(PUBLISHED_ROWS, encoding="utf-8")
        cli.main(["score", str(table)])
        err = capsys.readouterr().err
        assert "Nemotron" in err and "anomaly" in err
        assert "GPT-4" not in err

    def test_all_zero_row(self, tmp_path, capsys):
        table = tmp_path / "zeros.csv"
        table.write_text(
            "model,cot,thot,reread_cot,reread_thot,cove,hallucination\n"
            "null-model,0,0,0,0,0,100\n",
            encoding="utf-8",
        )
        code = cli.main(["score", str(table)])
        out = capsys.readouterr().out
        assert code == cli.EXIT_OK
        assert out.splitlines()[1].endswith(",0.00")

    def test_missing_column_diagnosed(self, tmp_path, capsys):
        table = tmp_path / "short.csv"
        table.write_text("model,cot\nm,1\n", encoding="utf-8")
        code = cli.main(["score", str(table)])
        captured = capsys.readouterr()
        assert code == cli.EXIT_FATAL
        assert "thot" in captured.err

    def test_non_numeric_cell_diagnosed_with_row(self, tmp_path, capsys):
        table = tmp_path / "bad.csv"
        table.write_text(
            "model,cot,thot,reread_cot,reread_thot,cove,hallucination\n"
            "m,abc,1,1,1,1,1\n",
            encoding="utf-8",
        )
        code = cli.main(["score", str(table)])
        captured = capsys.readouterr()
        assert code == cli.EXIT_FATAL
        assert "row 2" in captured.err

    def test_out_flag_writes_file(self, tmp_path, capsys):
        table = tmp_path / "table.csv"
        table.write_text(PUBLISHED_ROWS, encoding="utf-8")
        target = tmp_path / "scored.csv"
        assert cli.main(["score", str(table), "--out", str(target)]) == cli.EXIT_OK
        assert target.read_text().splitlines()[1].endswith("87.78")


class TestCmdValidateDataset:
    def test_clean_dataset(self, dataset_path, capsys):
        assert cli.main(["validate-dataset", str(dataset_path)]) == cli.EXIT_OK
        assert "5 valid records" in capsys.readouterr().out

    def test_violations_printed_with_line_numbers(self, tmp_path, capsys):
        lines = [
            json.dumps({"id": f"q{i}", "question": "x?", "response": "y"}) for i in range(10)
        ]
        lines.insert(2, json.dumps({"id": "bad", "question": "x?"}))
        path = tmp_path / "d.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        code = cli.main(["validate-dataset", str(path)])
        captured = capsys.readouterr()
        assert code == cli.EXIT_PARTIAL
        assert "line 3" in captured.out

    def test_unreadable_dataset_exit_one(self, tmp_path, capsys):
        assert cli.main(["validate-dataset", str(tmp_path / "none.jsonl")]) == cli.EXIT_FATAL


class TestChartSeries:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cli.ChartSeries("m", ("a", "b"), (1.0,))

    def test_out_of_range_value_rejected(self):
        with pytest.raises(ValueError):
            cli.ChartSeries("m", ("a",), (151.0,))
