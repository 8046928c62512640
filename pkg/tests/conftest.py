from __future__ import annotations

import pytest

from bell import dataset
from bell.backend import Backend, BackendProfile, ScriptRule
from bell.core import EvalRecord, TechniqueKind
from bell.pipeline import RunConfig

MATH_RECORDS = [
    EvalRecord(id="q01", question="Solve 3x + 5 = 20 for x.", baseline_response="x = 5"),
    EvalRecord(id="q02", question="Calculate the sum of 17 and 25.", baseline_response="42"),
    EvalRecord(id="q03", question="How many quarters are in 3 dollars?", baseline_response="12 quarters"),
    EvalRecord(
        id="q04",
        question="A train travels 60 km in 1.5 hours. Compute its average speed.",
        baseline_response="40 km per hour",
    ),
    EvalRecord(id="q05", question="What is 12 * 8?", baseline_response="96"),
]

# Scripted replies for the evaluated model, keyed on distinctive prompt
# fragments of each stage.
MODEL_RULES = (
    ScriptRule("verification questions", "1. Is the arithmetic correct?\n2. Does the answer match the question?"),
    ScriptRule("Answer the following question concisely", "Yes, that checks out."),
    ScriptRule("Verification results", "After checking, the answer is 42."),
    ScriptRule("Propose candidate solution", "One way to solve it: the answer is 42."),
    ScriptRule("Rate how promising", "7"),
    ScriptRule("Merge the strongest reasoning", "Combining both candidates: the answer is 42."),
    ScriptRule("Refine this into", "Final answer: 42."),
    ScriptRule("Extract the atomic propositions", "p means we know the inputs; q means we can solve.\nLOGIC: p -> q; q -> r"),
    ScriptRule("logical facts", "Given those facts, the answer is 42."),
)

JUDGE_RULES = (ScriptRule("Rate", "4"),)


@pytest.fixture
def records():
    return list(MATH_RECORDS)


@pytest.fixture
def model_profile():
    return BackendProfile(name="model", model_id="scripted-model", kind="scripted")


@pytest.fixture
def judge_profile():
    return BackendProfile(name="judge", model_id="scripted-judge", kind="scripted")


@pytest.fixture
def embedder_profile():
    return BackendProfile(name="embedder", model_id="tf-hash", kind="local-hash")


@pytest.fixture
def backend(tmp_path, model_profile, judge_profile):
    return Backend(
        cache_dir=tmp_path / "cache",
        scripts={"model": MODEL_RULES, "judge": JUDGE_RULES},
    )


@pytest.fixture
def dataset_path(tmp_path, records):
    path = tmp_path / "dataset.jsonl"
    dataset.write(records, path)
    return path


def make_run_config(tmp_path, dataset_path, techniques, out_name="run", **kwargs) -> RunConfig:
    defaults = dict(
        dataset_path=str(dataset_path),
        out_dir=str(tmp_path / out_name),
        model=BackendProfile(name="model", model_id="scripted-model", kind="scripted"),
        judge=BackendProfile(name="judge", model_id="scripted-judge", kind="scripted"),
        embedder=BackendProfile(name="embedder", model_id="tf-hash", kind="local-hash"),
        techniques=tuple(techniques),
        scripts={"model": MODEL_RULES, "judge": JUDGE_RULES},
        workers=4,
    )
    defaults.update(kwargs)
    return RunConfig(**defaults)


def make_config_dict(dataset_path, out_dir, techniques=("cot", "cove")) -> dict:
    """The JSON document form of a fully scripted offline run config."""
    return {
        "dataset": {"path": str(dataset_path), "seed": 7},
        "out_dir": str(out_dir),
        "profiles": {
            "model": {"model_id": "scripted-model", "kind": "scripted"},
            "judge": {"model_id": "scripted-judge", "kind": "scripted"},
            "embedder": {"model_id": "tf-hash", "kind": "local-hash"},
        },
        "scripts": {
            "model": [{"contains": r.contains, "reply": r.reply} for r in MODEL_RULES],
            "judge": [{"contains": r.contains, "reply": r.reply} for r in JUDGE_RULES],
        },
        "techniques": list(techniques),
        "workers": 2,
    }


ALL_BENCHMARK = (
    TechniqueKind.COT,
    TechniqueKind.THOT,
    TechniqueKind.REREAD_COT,
    TechniqueKind.REREAD_THOT,
    TechniqueKind.COVE,
)
