"""Per-explanation metric suite.

Cosine similarity compares the final explanation's embedding against the
record's reference answer. Coherence, confidence and the three judge
sub-metrics (relevance, consistency, fluency) come from rubric prompts sent
to a judge model and are affine images of the raw 1-5 integer score. The
hallucination score combines both signals:

    1 - 0.8 * mean(sub-metrics) - 0.2 * max(0, cosine similarity)
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from bell.backend import (
    Backend,
    BackendError,
    BackendProfile,
    ChatMessage,
    ChatRequest,
    EmbeddingVector,
)
from bell.core import (
    GEVAL_KEYS,
    EvalRecord,
    ExplanationTranscript,
    MetricBundle,
    clamp01,
    hallucination_from,
    mean_of,
)

log = logging.getLogger(__name__)

JUDGE_SYSTEM = "You are a strict evaluator. Reply with a single integer score."

# Normalizer for logprob-based uncertainty: ln of a typical vocabulary size,
# so a uniformly clueless next-token distribution maps to 1.
LOGPROB_VOCAB_SIZE = 50257

UNCERTAINTY_MODES = ("judge", "logprob")


class MetricUnavailableError(Exception):
    """A judge metric could not be parsed even after the stricter retry."""

    def __init__(self, metric_name: str, detail: str = ""):
        super().__init__(f"metric {metric_name!r} unavailable{': ' + detail if detail else ''}")
        self.metric_name = metric_name


@dataclass(frozen=True)
class JudgeRubric:
    """One rubric prompt plus how to read the judge's integer reply."""

    metric_name: str
    rubric_text: str
    scale_min: int = 1
    scale_max: int = 5
    parse_pattern: str = r"-?\d+"

    def __post_init__(self):
        if self.scale_min >= self.scale_max:
            raise ValueError("scale_min must be < scale_max")

    def parse_score(self, reply: str) -> int | None:
        m = re.search(self.parse_pattern, reply)
        if not m:
            return None
        value = int(m.group(0))
        if not self.scale_min <= value <= self.scale_max:
            return None
        return value

    def normalize(self, raw: int) -> float:
        return (raw - self.scale_min) / (self.scale_max - self.scale_min)

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric_name": self.metric_name,
            "rubric_text": self.rubric_text,
            "scale_min": self.scale_min,
            "scale_max": self.scale_max,
            "parse_pattern": self.parse_pattern,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "JudgeRubric":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def default_rubrics() -> dict[str, JudgeRubric]:
    scale = "on a scale from 1 (worst) to 5 (best). Reply with only the integer."
    return {
        "coherence": JudgeRubric(
            "coherence",
            "Rate how logically consistent the explanation is and how well it "
            f"stays aligned with the question, {scale}",
        ),
        "confidence": JudgeRubric(
            "confidence",
            "Rate how confident and unambiguous the explanation is, from 1 "
            "(hedging, unclear, contradicts itself) to 5 (fully confident and "
            "definite). Reply with only the integer.",
        ),
        "relevance": JudgeRubric(
            "relevance",
            f"Rate how relevant the explanation is to the question asked, {scale}",
        ),
        "consistency": JudgeRubric(
            "consistency",
            "Rate how faithful the explanation is to the facts stated in the "
            f"question, with no fabricated details, {scale}",
        ),
        "fluency": JudgeRubric(
            "fluency",
            f"Rate the grammatical quality and readability of the explanation, {scale}",
        ),
    }


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Dot product over the product of magnitudes, in double precision."""
    if a.dimension != b.dimension:
        raise ValueError(f"dimension mismatch: {a.dimension} vs {b.dimension}")
    if a.is_zero() or b.is_zero():
        raise ValueError("cosine similarity of a zero vector is undefined")
    dot = math.fsum(x * y for x, y in zip(a.values, b.values))
    norm_a = math.sqrt(math.fsum(x * x for x in a.values))
    norm_b = math.sqrt(math.fsum(y * y for y in b.values))
    return dot / (norm_a * norm_b)


def _judge_request(question: str, explanation: str, rubric: JudgeRubric,
                   strict: bool = False) -> ChatRequest:
    user = (
        f"Question:\n{question}\n\nExplanation:\n{explanation}\n\n{rubric.rubric_text}"
    )
    if strict:
        user += (
            f"\nReply with ONLY one integer between {rubric.scale_min} and "
            f"{rubric.scale_max}."
        )
    return ChatRequest(
        messages=(ChatMessage("system", JUDGE_SYSTEM), ChatMessage("user", user)),
        temperature=0.0,
    )


def judge_score(
    backend: Backend,
    judge_profile: BackendProfile,
    rubric: JudgeRubric,
    question: str,
    explanation: str,
) -> float:
    """Normalized judge score in [0, 1]. One stricter retry on parse failure;
    a second failure marks the metric unavailable for this record."""
    reply = backend.chat(judge_profile, _judge_request(question, explanation, rubric)).content
    raw = rubric.parse_score(reply)
    if raw is None:
        reply = backend.chat(
            judge_profile, _judge_request(question, explanation, rubric, strict=True)
        ).content
        raw = rubric.parse_score(reply)
    if raw is None:
        raise MetricUnavailableError(rubric.metric_name, f"unparseable reply {reply[:60]!r}")
    return rubric.normalize(raw)


def coherence(
    backend: Backend,
    judge_profile: BackendProfile,
    transcript: ExplanationTranscript,
    record: EvalRecord,
    rubric: JudgeRubric | None = None,
) -> float:
    rubric = rubric or default_rubrics()["coherence"]
    return judge_score(backend, judge_profile, rubric, record.question, transcript.final_explanation)


def uncertainty_from_logprobs(logprobs) -> float:
    """min(1, mean(-logprob) / ln(vocab size)) over the completion tokens."""
    logprobs = list(logprobs)
    if not logprobs:
        raise ValueError("no log probabilities given")
    return min(1.0, mean_of(-lp for lp in logprobs) / math.log(LOGPROB_VOCAB_SIZE))


def uncertainty(
    backend: Backend,
    judge_profile: BackendProfile,
    transcript: ExplanationTranscript,
    record: EvalRecord,
    rubric: JudgeRubric | None = None,
    mode: str = "judge",
) -> float:
    """Higher means less confident. Judge mode asks for a confidence rating
    and inverts it; logprob mode uses the final response's token logprobs
    when the transcript carries them, falling back to judge mode otherwise."""
    if mode not in UNCERTAINTY_MODES:
        raise ValueError(f"unknown uncertainty mode {mode!r}")
    if mode == "logprob" and transcript.final_logprobs:
        return uncertainty_from_logprobs(transcript.final_logprobs)
    rubric = rubric or default_rubrics()["confidence"]
    confidence = judge_score(
        backend, judge_profile, rubric, record.question, transcript.final_explanation
    )
    return 1.0 - confidence


def geval_submetrics(
    backend: Backend,
    judge_profile: BackendProfile,
    transcript: ExplanationTranscript,
    record: EvalRecord,
    rubrics: Mapping[str, JudgeRubric] | None = None,
) -> dict[str, float]:
    """The judge sub-metric map feeding the hallucination formula. Keys
    default to relevance, consistency and fluency; the set is extensible
    through the rubric configuration."""
    all_rubrics = dict(rubrics) if rubrics is not None else default_rubrics()
    selected = {k: all_rubrics[k] for k in all_rubrics if k in GEVAL_KEYS} or {
        k: all_rubrics[k] for k in all_rubrics
    }
    return {
        name: judge_score(
            backend, judge_profile, rubric, record.question, transcript.final_explanation
        )
        for name, rubric in selected.items()
    }


def hallucination(submetrics: Mapping[str, float], cos_sim: float) -> float:
    """1 - 0.8*mean(submetrics) - 0.2*max(0, cos_sim), clamped into [0, 1]."""
    raw = hallucination_from(submetrics, cos_sim)
    clamped = clamp01(raw)
    if clamped != raw:
        log.warning("hallucination score %.6f clamped to %.1f", raw, clamped)
    return clamped


@dataclass(frozen=True)
class MetricProfiles:
    judge: BackendProfile
    embedder: BackendProfile


@dataclass(frozen=True)
class MetricConfig:
    rubrics: Mapping[str, JudgeRubric] = field(default_factory=default_rubrics)
    uncertainty_mode: str = "judge"

    def to_dict(self) -> dict[str, Any]:
        return {
            "rubrics": {k: r.to_dict() for k, r in self.rubrics.items()},
            "uncertainty_mode": self.uncertainty_mode,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricConfig":
        rubrics = default_rubrics()
        for name, spec in d.get("rubrics", {}).items():
            rubrics[name] = JudgeRubric.from_dict({"metric_name": name, **spec})
        return cls(rubrics=rubrics, uncertainty_mode=d.get("uncertainty_mode", "judge"))


def score_explanation(
    backend: Backend,
    profiles: MetricProfiles,
    transcript: ExplanationTranscript,
    record: EvalRecord,
    config: MetricConfig = MetricConfig(),
) -> MetricBundle:
    """Assemble the full MetricBundle for one transcript.

    Constituents that fail (judge unparseable twice, embedding backend down
    or degenerate) are recorded in `missing` and leave the bundle partial;
    partial bundles are excluded from aggregation and tallied by the caller.
    """
    missing: list[str] = []

    cos: float | None = None
    try:
        explanation_vec = backend.embed(profiles.embedder, transcript.final_explanation)
        baseline_vec = backend.embed(profiles.embedder, record.baseline_response)
        cos = cosine_similarity(explanation_vec, baseline_vec)
    except (BackendError, ValueError) as exc:
        log.warning("cosine similarity unavailable for %s: %s", record.id, exc)
        missing.append("cosine_similarity")

    coherence_value: float | None = None
    try:
        coherence_value = coherence(
            backend, profiles.judge, transcript, record, config.rubrics.get("coherence")
        )
    except (BackendError, MetricUnavailableError) as exc:
        log.warning("coherence unavailable for %s: %s", record.id, exc)
        missing.append("coherence")

    uncertainty_value: float | None = None
    try:
        uncertainty_value = uncertainty(
            backend, profiles.judge, transcript, record,
            config.rubrics.get("confidence"), mode=config.uncertainty_mode,
        )
    except (BackendError, MetricUnavailableError) as exc:
        log.warning("uncertainty unavailable for %s: %s", record.id, exc)
        missing.append("uncertainty")

    submetrics: dict[str, float] = {}
    try:
        submetrics = geval_submetrics(
            backend, profiles.judge, transcript, record, config.rubrics
        )
    except (BackendError, MetricUnavailableError) as exc:
        log.warning("judge sub-metrics unavailable for %s: %s", record.id, exc)
        missing.append("geval_submetrics")

    hallucination_value: float | None = None
    if submetrics and cos is not None:
        hallucination_value = hallucination(submetrics, cos)
    elif "hallucination" not in missing:
        missing.append("hallucination")

    return MetricBundle(
        coherence=coherence_value,
        uncertainty=uncertainty_value,
        cosine_similarity=cos,
        geval_submetrics=submetrics,
        hallucination=hallucination_value,
        missing=tuple(missing),
    )
