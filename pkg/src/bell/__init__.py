"""bell: a benchmarking harness for the explainability of large language models.

The harness elicits structured reasoning from chat models through a family of
prompt programs (chain-of-thought, thread-of-thought, re-reading, verification
chains, graph plans, logic injection), scores each explanation with judge-based
and embedding-based metrics, and aggregates the results into per-model
scorecards.
"""

__version__ = "0.1.0"

from bell.core import (
    EvalRecord,
    ExplanationTranscript,
    MetricBundle,
    Scorecard,
    TechniqueKind,
)

__all__ = [
    "EvalRecord",
    "ExplanationTranscript",
    "MetricBundle",
    "Scorecard",
    "TechniqueKind",
    "__version__",
]
