import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bell.core import (
    BENCHMARK_TECHNIQUES,
    MetricBundle,
    Scorecard,
    TechniqueKind,
    hallucination_from,
)
from bell.score import (
    EPSILON_DENOMINATOR,
    SCORECARD_CSV_COLUMNS,
    EmptyAggregateError,
    IncompleteScorecardError,
    aggregate_technique,
    format_pct,
    model_score,
    overall_score,
    per_record_score,
    round_half_up,
    scorecard_csv,
    scorecard_markdown,
)


def make_bundle(coherence, uncertainty, cos, sub=0.8):
    submetrics = {"relevance": sub, "consistency": sub, "fluency": sub}
    return MetricBundle(
        coherence=coherence,
        uncertainty=uncertainty,
        cosine_similarity=cos,
        geval_submetrics=submetrics,
        hallucination=max(0.0, min(1.0, hallucination_from(submetrics, cos))),
    )


PARTIAL = MetricBundle(
    coherence=None, uncertainty=0.1, cosine_similarity=0.5,
    geval_submetrics={}, hallucination=None, missing=("coherence",),
)


class TestPerRecordScore:
    def test_printed_mode_quotient(self):
        assert per_record_score(make_bundle(0.9, 0.2, 0.8), "printed") == pytest.approx(0.9, abs=1e-12)

    def test_mean_mode(self):
        value = per_record_score(make_bundle(0.9, 0.2, 0.8), "mean")
        assert value == pytest.approx((0.9 + 0.8 + 0.8) / 3, abs=1e-12)

    def test_zero_denominator_hits_epsilon_guard_and_cap(self):
        assert per_record_score(make_bundle(0.5, 0.0, 0.0), "printed") == 1.5

    def test_negative_cosine_clamped_before_denominator(self):
        # denominator is 0.5 + max(0, -0.9) = 0.5
        value = per_record_score(make_bundle(0.6, 0.5, -0.9), "printed")
        assert value == pytest.approx(1.2, abs=1e-12)

    def test_partial_bundle_rejected(self):
        with pytest.raises(ValueError):
            per_record_score(PARTIAL, "printed")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            per_record_score(make_bundle(0.9, 0.2, 0.8), "median")


class TestOverallScore:
    def test_singleton(self):
        assert overall_score([make_bundle(0.9, 0.2, 0.8)], "printed") == pytest.approx(90.0, abs=1e-9)

    def test_two_point_mean(self):
        bundles = [make_bundle(0.8, 0.0, 1.0), make_bundle(1.0, 0.0, 1.0)]
        assert overall_score(bundles, "printed") == pytest.approx(90.0, abs=1e-9)

    def test_identical_bundles_equal_per_record(self):
        bundle = make_bundle(0.7, 0.3, 0.4)
        assert overall_score([bundle] * 5, "printed") == pytest.approx(
            100 * per_record_score(bundle, "printed"), abs=1e-9
        )

    def test_all_partial_raises(self):
        with pytest.raises(EmptyAggregateError):
            overall_score([PARTIAL, PARTIAL], "printed")

    def test_partial_excluded_not_zeroed(self):
        bundles = [make_bundle(0.9, 0.2, 0.8), PARTIAL]
        assert overall_score(bundles, "printed") == pytest.approx(90.0, abs=1e-9)


class TestAggregateTechnique:
    def test_counts_and_clamp_events(self):
        pairs = [
            ("q1", make_bundle(0.9, 0.2, 0.8)),
            ("q2", make_bundle(0.5, 0.0, 0.0)),  # epsilon guard, then cap
            ("q3", None),
            ("q4", PARTIAL),
        ]
        aggregate = aggregate_technique(TechniqueKind.COT, pairs, "printed")
        assert aggregate.n_included == 2
        assert aggregate.n_excluded == 2
        assert aggregate.n_epsilon_guard == 1
        assert aggregate.n_capped == 1
        assert aggregate.overall_score_pct == pytest.approx(100 * (0.9 + 1.5) / 2, abs=1e-9)

    def test_order_independent_value(self):
        pairs = [("q1", make_bundle(0.9, 0.2, 0.8)), ("q2", make_bundle(0.6, 0.1, 0.5))]
        forward = aggregate_technique(TechniqueKind.COT, pairs, "printed")
        backward = aggregate_technique(TechniqueKind.COT, list(reversed(pairs)), "printed")
        assert forward.overall_score_pct == backward.overall_score_pct


class TestModelScore:
    def _per_technique(self, cot, thot, reread_cot, reread_thot, cove):
        return dict(zip(BENCHMARK_TECHNIQUES, (cot, thot, reread_cot, reread_thot, cove)))

    def test_published_gpt4_row(self):
        value = model_score(self._per_technique(85.28, 92.39, 91.91, 91.37, 85.14), 19.42)
        assert round_half_up(value) == 87.78

    def test_published_llama32_3b_row_exact(self):
        value = model_score(self._per_technique(76.95, 88.7, 88.76, 86.8, 82.21), 31.96)
        assert round_half_up(value) == 81.91

    def test_fixed_point_of_the_mean(self):
        assert model_score(self._per_technique(100, 100, 100, 100, 100), 0.0) == pytest.approx(100.0)

    def test_zero_row(self):
        assert model_score(self._per_technique(0, 0, 0, 0, 0), 100.0) == pytest.approx(0.0)

    def test_missing_technique_rejected(self):
        per_technique = self._per_technique(1, 2, 3, 4, 5)
        del per_technique[TechniqueKind.COVE]
        with pytest.raises(IncompleteScorecardError, match="cove"):
            model_score(per_technique, 10.0)

    @given(
        values=st.lists(
            st.floats(min_value=0, max_value=100, allow_nan=False), min_size=5, max_size=5
        ),
        hallucination=st.floats(min_value=0, max_value=100, allow_nan=False),
    )
    def test_permutation_invariant(self, values, hallucination):
        base = model_score(dict(zip(BENCHMARK_TECHNIQUES, values)), hallucination)
        for permutation in itertools.islice(itertools.permutations(values), 8):
            permuted = model_score(dict(zip(BENCHMARK_TECHNIQUES, permutation)), hallucination)
            assert permuted == pytest.approx(base, abs=1e-9)

    @given(
        hall_low=st.floats(min_value=0, max_value=99, allow_nan=False),
        bump=st.floats(min_value=0.01, max_value=1, allow_nan=False),
    )
    def test_strictly_decreasing_in_hallucination(self, hall_low, bump):
        per_technique = self._per_technique(80, 80, 80, 80, 80)
        hall_high = min(100.0, hall_low + bump)
        assert model_score(per_technique, hall_high) < model_score(per_technique, hall_low)


class TestRounding:
    def test_half_up(self):
        assert round_half_up(76.545) == 76.55
        assert round_half_up(76.544999) == 76.54
        assert round_half_up(2.675) == 2.68  # naive float rounding would give 2.67

    def test_format_pct(self):
        assert format_pct(None) == ""
        assert format_pct(85.2839) == "85.28"


class TestReports:
    def _card(self):
        return Scorecard(
            model_id="demo-model",
            per_technique=dict(zip(BENCHMARK_TECHNIQUES, (85.28, 92.39, 91.91, 91.37, 85.14))),
            hallucination_pct=19.42,
            model_score=87.778333,
            n_records=5,
        )

    def test_csv_header_is_fixed(self):
        text = scorecard_csv([self._card()])
        assert text.splitlines()[0] == ",".join(SCORECARD_CSV_COLUMNS)
        assert text.splitlines()[0] == (
            "model,cot,thot,reread_cot,reread_thot,cove,hallucination,model_score"
        )

    def test_csv_two_decimal_rows(self):
        row = scorecard_csv([self._card()]).splitlines()[1]
        assert row == "demo-model,85.28,92.39,91.91,91.37,85.14,19.42,87.78"

    def test_csv_blank_cells_for_missing(self):
        card = Scorecard(
            model_id="m",
            per_technique={TechniqueKind.COT: 80.0},
            hallucination_pct=25.0,
            model_score=None,
            n_records=3,
        )
        row = scorecard_csv([card]).splitlines()[1]
        assert row == "m,80.00,,,,,25.00,"

    def test_markdown_mirrors_table_layout(self):
        text = scorecard_markdown([self._card()])
        lines = text.splitlines()
        assert lines[0].startswith("| Model | CoT | ThoT | ReRead CoT | ReRead ThoT | CoVe |")
        assert "| demo-model | 85.28 |" in lines[2]

    def test_epsilon_constant(self):
        assert EPSILON_DENOMINATOR == 1e-6
