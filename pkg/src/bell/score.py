"""Aggregation of metric bundles into technique and model scores.

Two per-record aggregation modes exist because the source material defines
the combined score twice, in mutually inconsistent ways:

  printed  coherence / (uncertainty + clamped cosine), the quotient form,
           guarded by an epsilon denominator and capped at 1.5
  mean     mean(coherence, 1 - uncertainty, clamped cosine)

The default is the quotient form. The model score is the mean of the five
benchmark technique percentages together with the hallucination complement
(100 - hallucination); this reproduces the published reference table to two
decimals for six of seven rows, with one documented anomaly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Iterable, Mapping, Sequence

from bell.core import (
    BENCHMARK_TECHNIQUES,
    REPORT_SCALE,
    MetricBundle,
    Scorecard,
    TechniqueKind,
)

EPSILON_DENOMINATOR = 1e-6
PRINTED_SCORE_CAP = 1.5

MODES = ("printed", "mean")


class EmptyAggregateError(Exception):
    """No complete bundle was available to aggregate."""


class IncompleteScorecardError(Exception):
    """A technique required for the model score is missing."""


def round_half_up(value: float, decimals: int = 2) -> float:
    exponent = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(value)).quantize(exponent, rounding=ROUND_HALF_UP))


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown aggregation mode {mode!r} (expected one of {MODES})")


def _score_events(bundle: MetricBundle, mode: str) -> tuple[float, bool, bool]:
    """Returns (score, epsilon_guard_fired, cap_fired)."""
    if bundle.partial:
        raise ValueError("cannot score a partial bundle; exclude it instead")
    cos = max(0.0, bundle.cosine_similarity)
    if mode == "mean":
        return (bundle.coherence + (1.0 - bundle.uncertainty) + cos) / 3.0, False, False
    denominator = bundle.uncertainty + cos
    guarded = denominator < EPSILON_DENOMINATOR
    if guarded:
        denominator = EPSILON_DENOMINATOR
    quotient = bundle.coherence / denominator
    capped = quotient > PRINTED_SCORE_CAP
    return (PRINTED_SCORE_CAP if capped else max(0.0, quotient)), guarded, capped


def per_record_score(bundle: MetricBundle, mode: str = "printed") -> float:
    """Combined score of one complete bundle, on the internal [0, 1.5] scale."""
    _check_mode(mode)
    return _score_events(bundle, mode)[0]


def overall_score(bundles: Iterable[MetricBundle], mode: str = "printed") -> float:
    """100 x the arithmetic mean of per-record scores over complete bundles.

    Callers pass bundles in ascending record-id order; the value is order
    independent but the fixed order keeps runs bit-reproducible.
    """
    _check_mode(mode)
    complete = [b for b in bundles if not b.partial]
    if not complete:
        raise EmptyAggregateError("no complete bundles to aggregate")
    scores = [_score_events(b, mode)[0] for b in complete]
    return REPORT_SCALE * math.fsum(scores) / len(scores)


@dataclass(frozen=True)
class TechniqueAggregate:
    """One technique's aggregate plus the bookkeeping needed to audit it."""

    technique: TechniqueKind
    overall_score_pct: float
    n_included: int
    n_excluded: int
    mode: str
    n_epsilon_guard: int = 0
    n_capped: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "technique": self.technique.value,
            "overall_score_pct": self.overall_score_pct,
            "n_included": self.n_included,
            "n_excluded": self.n_excluded,
            "mode": self.mode,
            "n_epsilon_guard": self.n_epsilon_guard,
            "n_capped": self.n_capped,
        }


def aggregate_technique(
    technique: TechniqueKind,
    bundles_by_record: Iterable[tuple[str, MetricBundle | None]],
    mode: str = "printed",
) -> TechniqueAggregate:
    """Aggregate one technique over (record_id, bundle) pairs. None or
    partial bundles count as excluded, never as zero."""
    _check_mode(mode)
    ordered = sorted(bundles_by_record, key=lambda item: item[0])
    scores = []
    n_excluded = 0
    n_guard = 0
    n_capped = 0
    for _, bundle in ordered:
        if bundle is None or bundle.partial:
            n_excluded += 1
            continue
        score, guarded, capped = _score_events(bundle, mode)
        scores.append(score)
        n_guard += guarded
        n_capped += capped
    if not scores:
        raise EmptyAggregateError(f"no complete bundles for technique {technique.value}")
    return TechniqueAggregate(
        technique=technique,
        overall_score_pct=REPORT_SCALE * math.fsum(scores) / len(scores),
        n_included=len(scores),
        n_excluded=n_excluded,
        mode=mode,
        n_epsilon_guard=n_guard,
        n_capped=n_capped,
    )


def model_score(
    per_technique: Mapping[TechniqueKind, float], hallucination_pct: float
) -> float:
    """Mean of the five benchmark technique percentages and the hallucination
    complement. Unrounded; reports round half-up to two decimals."""
    missing = [t.value for t in BENCHMARK_TECHNIQUES if t not in per_technique]
    if missing:
        raise IncompleteScorecardError(f"missing technique scores: {', '.join(missing)}")
    values = [per_technique[t] for t in BENCHMARK_TECHNIQUES]
    values.append(100.0 - hallucination_pct)
    return math.fsum(values) / len(values)


# Fixed report schema. GOT and LOT runs appear in the scorecard JSON but not
# in the tabular reports.
SCORECARD_CSV_COLUMNS = (
    "model", "cot", "thot", "reread_cot", "reread_thot", "cove",
    "hallucination", "model_score",
)

_MD_HEADERS = (
    "Model", "CoT", "ThoT", "ReRead CoT", "ReRead ThoT", "CoVe",
    "Hallucination", "Model Score",
)


def format_pct(value: float | None) -> str:
    return "" if value is None else f"{round_half_up(value):.2f}"


def _row_values(card: Scorecard) -> list[str]:
    values = [card.model_id]
    for technique in BENCHMARK_TECHNIQUES:
        values.append(format_pct(card.per_technique.get(technique)))
    values.append(format_pct(card.hallucination_pct))
    values.append(format_pct(card.model_score))
    return values


def scorecard_csv(cards: Sequence[Scorecard]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SCORECARD_CSV_COLUMNS)
    for card in cards:
        writer.writerow(_row_values(card))
    return buffer.getvalue()


def scorecard_markdown(cards: Sequence[Scorecard]) -> str:
    lines = [
        "| " + " | ".join(_MD_HEADERS) + " |",
        "|" + "|".join(" --- " for _ in _MD_HEADERS) + "|",
    ]
    for card in cards:
        lines.append("| " + " | ".join(_row_values(card)) + " |")
    return "\n".join(lines) + "\n"
