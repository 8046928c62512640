"""Shared domain types used by every other module.

All types here are immutable value objects with a canonical JSON form
(lowercase snake_case field names). Nothing in this module performs I/O,
so instances are safe to share between worker threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

# Weights of the hallucination score: 1 - 0.8*mean(judge metrics) - 0.2*similarity.
HALLUCINATION_METRIC_WEIGHT = 0.8
HALLUCINATION_SIMILARITY_WEIGHT = 0.2

# Internal metric scale is [0, 1]; reports multiply by this factor.
REPORT_SCALE = 100.0

ROLES = ("system", "user", "assistant")

# Stage label of the untriggered completion used for the standalone
# hallucination column. Not a technique; see TechniqueKind.
PLAIN_LABEL = "plain"

# The three judge sub-metrics feeding the hallucination formula.
GEVAL_KEYS = ("relevance", "consistency", "fluency")


class TechniqueKind(str, Enum):
    """The seven thought-eliciting techniques. The set is closed: parsing any
    other name is rejected."""

    COT = "cot"
    THOT = "thot"
    REREAD_COT = "reread_cot"
    REREAD_THOT = "reread_thot"
    COVE = "cove"
    GOT = "got"
    LOT = "lot"


# The five techniques that appear in the benchmark scorecard table. GOT and
# LOT are runnable but are not part of the fixed table schema.
BENCHMARK_TECHNIQUES = (
    TechniqueKind.COT,
    TechniqueKind.THOT,
    TechniqueKind.REREAD_COT,
    TechniqueKind.REREAD_THOT,
    TechniqueKind.COVE,
)


def parse_technique(name: str) -> TechniqueKind:
    try:
        return TechniqueKind(name)
    except ValueError:
        known = ", ".join(t.value for t in TechniqueKind)
        raise ValueError(f"unknown technique {name!r} (expected one of: {known})") from None


def technique_label(technique: TechniqueKind | None) -> str:
    """Serialized name of a technique; None means the plain untriggered run."""
    return technique.value if technique is not None else PLAIN_LABEL


def parse_technique_label(label: str) -> TechniqueKind | None:
    if label == PLAIN_LABEL:
        return None
    return parse_technique(label)


def clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def mean_of(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("mean of empty sequence")
    return math.fsum(values) / len(values)


def hallucination_from(submetrics: Mapping[str, float], cosine_similarity: float) -> float:
    """Raw hallucination score before any clamping.

    1 - 0.8 * mean(submetrics) - 0.2 * max(0, cosine_similarity). Negative
    cosine is floored at zero so in-range inputs always land in [0, 1].
    """
    if not submetrics:
        raise ValueError("submetrics must be non-empty")
    sim = max(0.0, cosine_similarity)
    return (
        1.0
        - HALLUCINATION_METRIC_WEIGHT * mean_of(submetrics.values())
        - HALLUCINATION_SIMILARITY_WEIGHT * sim
    )


def canonical_dumps(payload: Any) -> str:
    """Canonical single-line JSON: sorted keys, no insignificant whitespace."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def pretty_dumps(payload: Any) -> str:
    """Stable human-readable JSON used for files written to run directories."""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


@dataclass(frozen=True)
class EvalRecord:
    """One dataset item: a question plus its reference answer.

    The reference answer (baseline_response) is what the generated
    explanation's embedding is compared against, so it must be non-empty.
    """

    id: str
    question: str
    baseline_response: str
    system_prompt: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "system_prompt": self.system_prompt,
            "question": self.question,
            "baseline_response": self.baseline_response,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalRecord":
        return cls(
            id=d["id"],
            question=d["question"],
            baseline_response=d["baseline_response"],
            system_prompt=d.get("system_prompt", ""),
        )


def validate_record(record: EvalRecord) -> list[str]:
    """Returns a list of invariant violations, empty when the record is ok.

    Violations are data, not errors: callers decide whether to skip or abort.
    """
    violations = []
    if not record.id:
        violations.append("id: must be non-empty")
    if not record.question:
        violations.append("question: must be non-empty")
    if not record.baseline_response:
        violations.append("baseline_response: must be non-empty")
    return violations


@dataclass(frozen=True)
class TranscriptStep:
    """A single message of a transcript, tagged with the stage it belongs to."""

    role: str
    content: str
    stage_label: str

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "content": self.content, "stage_label": self.stage_label}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TranscriptStep":
        return cls(role=d["role"], content=d["content"], stage_label=d["stage_label"])


@dataclass(frozen=True)
class ExplanationTranscript:
    """Full multi-turn record of one technique applied to one record.

    Every prompt and response of every stage is kept, in order. Steps of one
    stage are contiguous and share a stage_label; a label never recurs once
    its block has ended. technique=None marks the plain untriggered
    completion used for the standalone hallucination column.
    """

    record_id: str
    technique: TechniqueKind | None
    steps: tuple[TranscriptStep, ...]
    final_explanation: str
    model_id: str
    temperature: float = 0.0
    flags: tuple[str, ...] = ()
    annotations: Mapping[str, str] = field(default_factory=dict)
    final_logprobs: tuple[float, ...] | None = None

    def stage_labels(self) -> list[str]:
        """Distinct stage labels in order of first appearance."""
        seen: list[str] = []
        for step in self.steps:
            if not seen or seen[-1] != step.stage_label:
                seen.append(step.stage_label)
        return seen

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "technique": technique_label(self.technique),
            "steps": [s.to_dict() for s in self.steps],
            "final_explanation": self.final_explanation,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "flags": list(self.flags),
            "annotations": dict(self.annotations),
            "final_logprobs": list(self.final_logprobs) if self.final_logprobs is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExplanationTranscript":
        logprobs = d.get("final_logprobs")
        return cls(
            record_id=d["record_id"],
            technique=parse_technique_label(d["technique"]),
            steps=tuple(TranscriptStep.from_dict(s) for s in d["steps"]),
            final_explanation=d["final_explanation"],
            model_id=d["model_id"],
            temperature=d.get("temperature", 0.0),
            flags=tuple(d.get("flags", ())),
            annotations=dict(d.get("annotations", {})),
            final_logprobs=tuple(logprobs) if logprobs is not None else None,
        )


def validate_transcript(transcript: ExplanationTranscript) -> list[str]:
    violations = []
    if not transcript.steps:
        violations.append("steps: must be non-empty")
        return violations
    for i, step in enumerate(transcript.steps):
        if step.role not in ROLES:
            violations.append(f"steps[{i}].role: {step.role!r} not in {ROLES}")
    assistant_steps = [s for s in transcript.steps if s.role == "assistant"]
    if not assistant_steps:
        violations.append("steps: must contain at least one assistant step")
    elif transcript.final_explanation != assistant_steps[-1].content:
        violations.append("final_explanation: must equal the content of the last assistant step")
    # Stage labels must form contiguous blocks: once a block ends its label
    # may not come back.
    closed: set[str] = set()
    current: str | None = None
    for step in transcript.steps:
        if step.stage_label != current:
            if step.stage_label in closed:
                violations.append(f"stage_label {step.stage_label!r} recurs after its block ended")
            if current is not None:
                closed.add(current)
            current = step.stage_label
    return violations


@dataclass(frozen=True)
class MetricBundle:
    """Per-explanation scores.

    coherence, uncertainty, submetrics and hallucination live on [0, 1]
    (uncertainty: higher = less confident); cosine_similarity on [-1, 1].
    A metric that could not be computed is None and listed in `missing`;
    such bundles are "partial" and are excluded from aggregation.
    """

    coherence: float | None
    uncertainty: float | None
    cosine_similarity: float | None
    geval_submetrics: Mapping[str, float]
    hallucination: float | None
    missing: tuple[str, ...] = ()

    @property
    def partial(self) -> bool:
        return bool(self.missing)

    def to_dict(self) -> dict[str, Any]:
        return {
            "coherence": self.coherence,
            "uncertainty": self.uncertainty,
            "cosine_similarity": self.cosine_similarity,
            "geval_submetrics": dict(self.geval_submetrics),
            "hallucination": self.hallucination,
            "missing": list(self.missing),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricBundle":
        return cls(
            coherence=d["coherence"],
            uncertainty=d["uncertainty"],
            cosine_similarity=d["cosine_similarity"],
            geval_submetrics=dict(d["geval_submetrics"]),
            hallucination=d["hallucination"],
            missing=tuple(d.get("missing", ())),
        )


def validate_bundle(bundle: MetricBundle, tolerance: float = 1e-9) -> list[str]:
    """Range checks plus the hallucination consistency equation for complete
    bundles."""
    violations = []
    if bundle.partial:
        return violations
    for name in ("coherence", "uncertainty", "hallucination"):
        value = getattr(bundle, name)
        if value is None or not 0.0 <= value <= 1.0:
            violations.append(f"{name}: {value!r} outside [0, 1]")
    cos = bundle.cosine_similarity
    if cos is None or not -1.0 <= cos <= 1.0:
        violations.append(f"cosine_similarity: {cos!r} outside [-1, 1]")
    for key, value in bundle.geval_submetrics.items():
        if not 0.0 <= value <= 1.0:
            violations.append(f"geval_submetrics[{key}]: {value!r} outside [0, 1]")
    if not violations and bundle.geval_submetrics:
        expected = hallucination_from(bundle.geval_submetrics, cos)
        if abs(bundle.hallucination - expected) > tolerance:
            violations.append(
                f"hallucination: {bundle.hallucination!r} != recomputed {expected!r}"
            )
    return violations


@dataclass(frozen=True)
class Scorecard:
    """Per-model matrix of per-technique scores, on the 0-100 report scale.

    model_score is None until all five benchmark techniques have been run;
    when present it is recomputable from per_technique and hallucination_pct.
    """

    model_id: str
    per_technique: Mapping[TechniqueKind, float]
    hallucination_pct: float
    model_score: float | None
    n_records: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "per_technique": {t.value: v for t, v in self.per_technique.items()},
            "hallucination_pct": self.hallucination_pct,
            "model_score": self.model_score,
            "n_records": self.n_records,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scorecard":
        return cls(
            model_id=d["model_id"],
            per_technique={parse_technique(k): v for k, v in d["per_technique"].items()},
            hallucination_pct=d["hallucination_pct"],
            model_score=d["model_score"],
            n_records=d["n_records"],
        )
