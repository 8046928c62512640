"""Loading, filtering, and sampling of JSON-Lines question datasets.

Input lines carry the fields id, system_prompt, question, response; the
response field becomes the record's baseline_response. Loading is tolerant
of individual malformed lines (reported with line numbers) but aborts when
more than 10% of a file is malformed, which usually means the wrong file.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from bell.core import EvalRecord, validate_record

log = logging.getLogger(__name__)

MALFORMED_FATAL_FRACTION = 0.10

# Default keyword rules selecting mathematical problem-solving questions.
MATH_CATEGORY_RULES = (
    "solve",
    "equation",
    "calculate",
    "compute",
    "how many",
    "how much",
    "sum of",
    "difference between",
    "product of",
    "divide",
    "multiply",
    "fraction",
    "percent",
    "average",
    "math",
    r"\d\s*[-+*/=]\s*\d",
)


class DatasetError(Exception):
    """Fatal dataset problem: unreadable file or too many malformed lines."""


class RuleConfigError(Exception):
    """A category filter pattern failed to compile."""


@dataclass(frozen=True)
class LineViolation:
    line_no: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line_no}: {self.message}"


@dataclass(frozen=True)
class DatasetManifest:
    """Provenance of one dataset selection, enough to redo it bit-for-bit."""

    source_path: str
    total_rows: int
    selected_ids: tuple[str, ...]
    category_filter: str
    sample_seed: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_path": self.source_path,
            "total_rows": self.total_rows,
            "selected_ids": list(self.selected_ids),
            "category_filter": self.category_filter,
            "sample_seed": self.sample_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetManifest":
        return cls(
            source_path=d["source_path"],
            total_rows=d["total_rows"],
            selected_ids=tuple(d["selected_ids"]),
            category_filter=d["category_filter"],
            sample_seed=d["sample_seed"],
        )


def _record_from_line(payload: Mapping[str, Any]) -> EvalRecord:
    for key in ("id", "question", "response"):
        if key not in payload:
            raise KeyError(key)
    return EvalRecord(
        id=str(payload["id"]),
        question=str(payload["question"]),
        baseline_response=str(payload["response"]),
        system_prompt=str(payload.get("system_prompt", "")),
    )


def load(path: str | Path) -> tuple[list[EvalRecord], list[LineViolation]]:
    """Load a JSON-Lines dataset file.

    Returns the parsed records plus the list of per-line violations (each
    skipped line keeps the run going). Raises DatasetError when the file is
    unreadable or when more than 10% of its non-blank lines are malformed.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc

    records: list[EvalRecord] = []
    violations: list[LineViolation] = []
    seen_ids: set[str] = set()
    total_lines = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        total_lines += 1
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            violations.append(LineViolation(line_no, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(payload, dict):
            violations.append(LineViolation(line_no, "line is not a JSON object"))
            continue
        try:
            record = _record_from_line(payload)
        except KeyError as exc:
            violations.append(LineViolation(line_no, f"missing key {exc.args[0]!r}"))
            continue
        field_violations = validate_record(record)
        if field_violations:
            violations.append(LineViolation(line_no, "; ".join(field_violations)))
            continue
        if record.id in seen_ids:
            violations.append(LineViolation(line_no, f"duplicate id {record.id!r}"))
            continue
        seen_ids.add(record.id)
        records.append(record)

    if total_lines == 0:
        log.warning("dataset %s is empty", path)
        return records, violations
    if len(violations) / total_lines > MALFORMED_FATAL_FRACTION:
        raise DatasetError(
            f"{len(violations)} of {total_lines} lines malformed in {path} "
            f"(threshold {MALFORMED_FATAL_FRACTION:.0%}); wrong file?"
        )
    return records, violations


def write(records: Iterable[EvalRecord], path: str | Path) -> None:
    """Write records in the same JSON-Lines form load() reads."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps(
                    {
                        "id": record.id,
                        "system_prompt": record.system_prompt,
                        "question": record.question,
                        "response": record.baseline_response,
                    },
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


def compile_rules(keyword_rules: Sequence[str]) -> list[re.Pattern]:
    if not keyword_rules:
        raise RuleConfigError("keyword_rules must be non-empty")
    compiled = []
    for rule in keyword_rules:
        try:
            compiled.append(re.compile(rule, re.IGNORECASE))
        except re.error as exc:
            raise RuleConfigError(f"invalid filter pattern {rule!r}: {exc}") from exc
    return compiled


def filter_category(
    records: Iterable[EvalRecord], keyword_rules: Sequence[str]
) -> list[EvalRecord]:
    """Keep records whose question matches any rule, as a case-insensitive
    substring or as a regular expression. Order is preserved."""
    patterns = compile_rules(keyword_rules)
    lowered = [rule.lower() for rule in keyword_rules]
    kept = []
    for record in records:
        question_lower = record.question.lower()
        if any(rule in question_lower for rule in lowered) or any(
            p.search(record.question) for p in patterns
        ):
            kept.append(record)
    return kept


def sample(records: Sequence[EvalRecord], k: int, seed: int) -> list[EvalRecord]:
    """Deterministic sample without replacement of min(k, len) records."""
    if k < 0:
        raise ValueError("sample size must be >= 0")
    rng = random.Random(seed)
    return rng.sample(list(records), min(k, len(records)))
