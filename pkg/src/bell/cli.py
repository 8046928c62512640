"""Command-line entry point.

Subcommands: run, resume, report, score, validate-dataset.
Exit codes: 0 success, 1 fatal, 2 partial.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from bell import dataset, pipeline, score
from bell.core import (
    BENCHMARK_TECHNIQUES,
    Scorecard,
    TechniqueKind,
    parse_technique,
    pretty_dumps,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2

# A computed model score further than this from a provided one is anomalous.
SCORE_ANOMALY_TOLERANCE = 0.02

# Canonical label order for chart series.
_CHART_ORDER = list(TechniqueKind)


@dataclass(frozen=True)
class ChartSeries:
    """Chart-ready per-model series: one label/value pair per technique plus
    the hallucination column."""

    model_id: str
    labels: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.values):
            raise ValueError("labels and values must have equal length")
        for value in self.values:
            if not 0.0 <= value <= 150.0:
                raise ValueError(f"chart value {value} outside [0, 150]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "labels": list(self.labels),
            "values": list(self.values),
        }


def chart_series(card: Scorecard) -> ChartSeries:
    labels = [t.value for t in _CHART_ORDER if t in card.per_technique]
    values = [card.per_technique[t] for t in _CHART_ORDER if t in card.per_technique]
    labels.append("hallucination")
    values.append(card.hallucination_pct)
    return ChartSeries(card.model_id, tuple(labels), tuple(values))


def _load_config(config_path: str, args: argparse.Namespace) -> pipeline.RunConfig:
    try:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise pipeline.ConfigurationError(f"cannot read config {config_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise pipeline.ConfigurationError(
            f"config {config_path} is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}"
        ) from exc
    config = pipeline.config_from_dict(raw)

    overrides: dict[str, Any] = {}
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "techniques", None):
        overrides["techniques"] = tuple(
            parse_technique(t.strip()) for t in args.techniques.split(",") if t.strip()
        )
    if getattr(args, "sample", None) is not None:
        overrides["sample_k"] = args.sample
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    return replace(config, **overrides) if overrides else config


def _print_result(result: pipeline.RunResult) -> int:
    if result.scorecard is not None:
        sys.stdout.write(score.scorecard_markdown([result.scorecard]))
    print(
        f"tasks: {result.manifest.count(pipeline.STATUS_DONE)} done, "
        f"{result.n_partial} partial, {result.n_failed} failed, "
        f"{result.manifest.count(pipeline.STATUS_PENDING)} pending "
        f"(engine calls: {result.engine_calls})"
    )
    if result.failed_ids:
        print("failed records: " + ", ".join(result.failed_ids))
    if result.manifest.run_state == pipeline.RUN_FAILED:
        return EXIT_FATAL
    return EXIT_PARTIAL if result.n_failed > 0 else EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args.config, args)
        result = pipeline.run(config)
    except (pipeline.ConfigurationError, ValueError, dataset.DatasetError,
            dataset.RuleConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except pipeline.FatalRunError as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL
    return _print_result(result)


def cmd_resume(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args.config, args)
        result = pipeline.resume(config)
    except pipeline.ResumeError as exc:
        print(f"refusing to resume: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (pipeline.ConfigurationError, ValueError, dataset.DatasetError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except pipeline.FatalRunError as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL
    return _print_result(result)


def _sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name) or "model"


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    try:
        manifest = pipeline.load_manifest(run_dir)
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: no usable manifest in {run_dir}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    pending = manifest.count(pipeline.STATUS_PENDING)
    if manifest.run_state != pipeline.RUN_COMPLETE or pending:
        print(
            f"run is not complete: state={manifest.run_state}, {pending} pending tasks",
            file=sys.stderr,
        )
        return EXIT_PARTIAL

    scorecard_path = run_dir / "scorecard.json"
    try:
        card = Scorecard.from_dict(json.loads(scorecard_path.read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: cannot read {scorecard_path}: {exc}", file=sys.stderr)
        return EXIT_FATAL

    if args.format == "json":
        text = pretty_dumps(card.to_dict())
        pipeline.write_atomic(run_dir / "scorecard.json", text)
        sys.stdout.write(text)
    elif args.format == "csv":
        text = score.scorecard_csv([card])
        pipeline.write_atomic(run_dir / "scorecard.csv", text)
        sys.stdout.write(text)
    elif args.format == "md":
        text = score.scorecard_markdown([card])
        pipeline.write_atomic(run_dir / "scorecard.md", text)
        sys.stdout.write(text)
    else:  # chart
        series = chart_series(card)
        path = run_dir / "charts" / f"{_sanitize(card.model_id)}.json"
        pipeline.write_atomic(path, pretty_dumps(series.to_dict()))
        print(path)
    return EXIT_OK


def _score_csv_rows(text: str) -> tuple[list[dict[str, str]], list[str]]:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    required = [c for c in score.SCORECARD_CSV_COLUMNS if c != "model_score"]
    missing = [c for c in required if c not in header]
    if missing:
        raise ValueError(f"missing columns: {', '.join(missing)}")
    return list(reader), header


def append_model_scores(text: str) -> tuple[str, list[str]]:
    """Recompute the model score for every row of a scorecard CSV.

    Returns the CSV with the model_score column appended (or replaced) plus
    anomaly notes for rows whose provided score disagrees with the computed
    one by more than the tolerance.
    """
    rows, _ = _score_csv_rows(text)
    anomalies: list[str] = []
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(score.SCORECARD_CSV_COLUMNS)
    for i, row in enumerate(rows, start=2):
        try:
            per_technique = {
                t: float(row[t.value]) for t in BENCHMARK_TECHNIQUES
            }
            hallucination_pct = float(row["hallucination"])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"row {i}: non-numeric score value ({exc})") from exc
        computed = score.round_half_up(score.model_score(per_technique, hallucination_pct))
        provided = row.get("model_score")
        if provided not in (None, ""):
            try:
                delta = abs(float(provided) - computed)
            except ValueError as exc:
                raise ValueError(f"row {i}: bad model_score {provided!r}") from exc
            if delta > SCORE_ANOMALY_TOLERANCE:
                anomalies.append(
                    f"anomaly: {row['model']} provided {float(provided):.2f} "
                    f"vs computed {computed:.2f}"
                )
        writer.writerow(
            [row["model"]]
            + [f"{float(row[t.value]):.2f}" for t in BENCHMARK_TECHNIQUES]
            + [f"{hallucination_pct:.2f}", f"{computed:.2f}"]
        )
    return buffer.getvalue(), anomalies


def cmd_score(args: argparse.Namespace) -> int:
    try:
        text = Path(args.table).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {args.table}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    try:
        output, anomalies = append_model_scores(text)
    except ValueError as exc:
        print(f"error: malformed table: {exc}", file=sys.stderr)
        return EXIT_FATAL
    for note in anomalies:
        print(note, file=sys.stderr)
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
    else:
        sys.stdout.write(output)
    return EXIT_OK


def cmd_validate_dataset(args: argparse.Namespace) -> int:
    try:
        records, violations = dataset.load(args.path)
    except dataset.DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    for violation in violations:
        print(violation)
    print(f"{len(records)} valid records, {len(violations)} violations")
    return EXIT_PARTIAL if violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bell",
        description="Benchmark the explainability of chat models with "
                    "thought-eliciting prompt programs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("-c", "--config", required=True, help="run config JSON")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--techniques", help="comma-separated technique list")
        p.add_argument("--sample", type=int, help="sample size")
        p.add_argument("--seed", type=int, help="sampling seed")
        p.add_argument("--mode", choices=score.MODES, help="aggregation mode")

    p_run = sub.add_parser("run", help="execute a full benchmark run")
    add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_resume = sub.add_parser("resume", help="continue an interrupted run")
    add_run_flags(p_resume)
    p_resume.set_defaults(func=cmd_resume)

    p_report = sub.add_parser("report", help="emit the scorecard of a finished run")
    p_report.add_argument("run_dir", help="run output directory")
    p_report.add_argument("--format", choices=("csv", "json", "md", "chart"), default="md")
    p_report.set_defaults(func=cmd_report)

    p_score = sub.add_parser(
        "score", help="append computed model scores to a scorecard CSV"
    )
    p_score.add_argument("table", help="CSV with per-technique and hallucination columns")
    p_score.add_argument("--out", help="write the result here instead of stdout")
    p_score.set_defaults(func=cmd_score)

    p_validate = sub.add_parser("validate-dataset", help="check a JSON-Lines dataset")
    p_validate.add_argument("path", help="dataset file")
    p_validate.set_defaults(func=cmd_validate_dataset)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
