import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwekit.backend import BackendTransportError, CompletionRequest, ResponderBackend
from cwekit.catalog import CweId
from cwekit.dataset import LabeledInstance, LabelError, Verdict
from cwekit.evaluation import (
    SECURE,
    UNPARSEABLE,
    VULNERABLE,
    ConfusionMatrix,
    EvalRow,
    EvalRunError,
    compute_metrics,
    format_summary,
    instruction_digest,
    parse_model_output,
    rescore,
    rows_from_dicts,
    rows_to_dicts,
    run_eval,
    score_prediction,
)


class TestParseCascade:
    def test_rule1_strict_labels(self):
        parsed = parse_model_output("Vulnerable - CWE-79")
        assert (parsed.kind, parsed.cwe, parsed.rule) == (VULNERABLE, CweId(79), 1)
        parsed = parse_model_output("Secure\n")
        assert (parsed.kind, parsed.rule) == (SECURE, 1)

    @pytest.mark.parametrize("text", [
        "secure.",
        "The code is secure",
        "SECURE",
        "This looks secure, though vulnerable patterns exist elsewhere",
    ])
    def test_rule2_secure_word_on_first_line(self, text):
        parsed = parse_model_output(text)
        assert (parsed.kind, parsed.rule) == (SECURE, 2)

    @pytest.mark.parametrize("text,number", [
        ("This is vulnerable to CWE-89 injection", 89),
        ("Vulnerable (CWE 79)", 79),
        ("vulnerable: cwe_22 path traversal", 22),
        ("It is vulnerable.\nSpecifically CWE-416.", 416),
        ("vulnerable to CWE-007", 7),
    ])
    def test_rule3_vulnerable_with_id_in_first_two_lines(self, text, number):
        parsed = parse_model_output(text)
        assert (parsed.kind, parsed.cwe, parsed.rule) == (VULNERABLE, CweId(number), 3)

    @pytest.mark.parametrize("text", [
        "vulnerable: sql injection risk",
        "Clearly vulnerable.",
        "vulnerable\nno id here\nCWE-89 on a later line",
        "vulnerable to CWE-0",
    ])
    def test_rule4_bare_vulnerable_claim(self, text):
        parsed = parse_model_output(text)
        assert (parsed.kind, parsed.cwe, parsed.rule) == (VULNERABLE, None, 4)

    @pytest.mark.parametrize("text", [
        "",
        "   \n \n",
        "the snippet prints a greeting",
        "invulnerable by design",
        "securely stored",  # no standalone "secure" token
        "def f():\n    return 1",
    ])
    def test_rule5_unparseable(self, text):
        parsed = parse_model_output(text)
        assert (parsed.kind, parsed.rule) == (UNPARSEABLE, 5)

    def test_secure_beats_vulnerable_on_first_line(self):
        parsed = parse_model_output("secure, not vulnerable")
        assert parsed.kind == SECURE

    def test_third_line_id_is_ignored(self):
        parsed = parse_model_output("vulnerable\nbad news\nCWE-89")
        assert parsed.kind == VULNERABLE
        assert parsed.cwe is None

    def test_non_string_input(self):
        assert parse_model_output(None).kind == UNPARSEABLE

    @settings(max_examples=200)
    @given(st.text(max_size=200))
    def test_total_function_never_raises(self, text):
        parsed = parse_model_output(text)
        assert parsed.kind in (SECURE, VULNERABLE, UNPARSEABLE)
        assert parsed.rule in (1, 2, 3, 4, 5)


class TestScorePrediction:
    def gold_v(self, n=79):
        return Verdict.vulnerable(CweId(n))

    def test_true_positive_exact(self):
        assert score_prediction(self.gold_v(), parse_model_output("Vulnerable - CWE-79")) \
            == ("tp", True)

    def test_true_positive_wrong_cwe_not_exact(self):
        assert score_prediction(self.gold_v(), parse_model_output("Vulnerable - CWE-89")) \
            == ("tp", False)

    def test_true_positive_without_id_not_exact(self):
        assert score_prediction(self.gold_v(), parse_model_output("clearly vulnerable")) \
            == ("tp", False)

    def test_false_negative_from_secure_claim(self):
        assert score_prediction(self.gold_v(), parse_model_output("Secure")) == ("fn", False)

    def test_false_negative_from_unparseable(self):
        assert score_prediction(self.gold_v(), parse_model_output("n/a")) == ("fn", False)

    def test_true_negative_exact(self):
        assert score_prediction(Verdict.secure(), parse_model_output("Secure")) == ("tn", True)

    def test_true_negative_from_unparseable_not_exact(self):
        assert score_prediction(Verdict.secure(), parse_model_output("hmm")) == ("tn", False)

    def test_false_positive(self):
        assert score_prediction(Verdict.secure(), parse_model_output("Vulnerable - CWE-79")) \
            == ("fp", False)


class TestMetrics:
    def test_reference_matrix(self):
        metrics = compute_metrics(ConfusionMatrix(tp=51, fp=1, fn=0, tn=48))
        assert metrics.accuracy == pytest.approx(0.99)
        assert metrics.precision == pytest.approx(51 / 52)
        assert metrics.recall == pytest.approx(1.0)
        assert metrics.f1 == pytest.approx(102 / 103)

    def test_undefined_precision_flagged_none(self):
        metrics = compute_metrics(ConfusionMatrix(tp=0, fp=0, fn=5, tn=5))
        assert metrics.precision is None
        assert metrics.recall == 0.0
        assert metrics.f1 is None
        assert metrics.accuracy == 0.5

    def test_undefined_recall_flagged_none(self):
        metrics = compute_metrics(ConfusionMatrix(tp=0, fp=3, fn=0, tn=7))
        assert metrics.recall is None
        assert metrics.precision == 0.0

    def test_f1_undefined_when_both_rates_are_zero(self):
        # precision and recall both come out 0, so the harmonic mean is 0/0
        metrics = compute_metrics(ConfusionMatrix(tp=0, fp=2, fn=2, tn=6))
        assert metrics.f1 is None

    def test_empty_matrix_is_an_error(self):
        with pytest.raises(EvalRunError, match="empty"):
            compute_metrics(ConfusionMatrix())

    def test_negative_cells_rejected(self):
        with pytest.raises(EvalRunError):
            ConfusionMatrix(tp=-1)

    @settings(max_examples=200)
    @given(tp=st.integers(0, 500), fp=st.integers(0, 500),
           fn=st.integers(0, 500), tn=st.integers(0, 500))
    def test_metric_identities(self, tp, fp, fn, tn):
        matrix = ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)
        if matrix.total == 0:
            return
        metrics = compute_metrics(matrix)
        assert metrics.accuracy == pytest.approx((tp + tn) / matrix.total)
        assert (metrics.precision is None) == (tp + fp == 0)
        assert (metrics.recall is None) == (tp + fn == 0)
        if metrics.precision is not None:
            assert metrics.precision == pytest.approx(tp / (tp + fp))
        if metrics.recall is not None:
            assert metrics.recall == pytest.approx(tp / (tp + fn))
        if (metrics.precision is None or metrics.recall is None
                or metrics.precision + metrics.recall == 0):
            assert metrics.f1 is None
        else:
            expected = (2 * metrics.precision * metrics.recall
                        / (metrics.precision + metrics.recall))
            assert metrics.f1 == pytest.approx(expected)
        for value in (metrics.accuracy, metrics.precision, metrics.recall, metrics.f1):
            if value is not None:
                assert 0.0 <= value <= 1.0


class TestEvalRows:
    def test_exactly_one_of_raw_or_error(self):
        EvalRow(index=0, gold="Secure", raw="Secure")
        EvalRow(index=1, gold="Secure", error="boom")
        with pytest.raises(EvalRunError):
            EvalRow(index=2, gold="Secure")
        with pytest.raises(EvalRunError):
            EvalRow(index=3, gold="Secure", raw="x", error="y")

    def test_gold_must_be_canonical(self):
        with pytest.raises(LabelError):
            EvalRow(index=0, gold="secure", raw="x")

    def test_dict_round_trip(self):
        rows = [EvalRow(index=0, gold="Secure", raw="Secure"),
                EvalRow(index=1, gold="Vulnerable - CWE-79", error="timeout")]
        assert rows_from_dicts(rows_to_dicts(rows)) == rows

    def test_bad_record_names_position(self):
        with pytest.raises(EvalRunError, match="record 0"):
            rows_from_dicts([{"gold": "Secure"}])


def make_rows(spec):
    """spec: list of (gold, raw_or_None, error_or_None)."""
    return [EvalRow(index=i, gold=gold, raw=raw, error=error)
            for i, (gold, raw, error) in enumerate(spec)]


class TestRescore:
    def test_counts_and_per_cwe(self):
        rows = make_rows([
            ("Vulnerable - CWE-79", "Vulnerable - CWE-79", None),
            ("Vulnerable - CWE-79", "Secure", None),
            ("Vulnerable - CWE-89", "vulnerable cwe-89", None),
            ("Secure", "Secure", None),
            ("Secure", "Vulnerable - CWE-79", None),
            ("Secure", "no idea", None),
            ("Vulnerable - CWE-22", None, "connection reset"),
        ])
        report = rescore(rows, {"mode": "model"})
        assert (report.matrix.tp, report.matrix.fp, report.matrix.fn, report.matrix.tn) \
            == (2, 1, 1, 2)
        assert report.errors == 1
        assert report.unparseable == 1
        assert report.total == 7
        assert report.per_cwe["CWE-79"].instances == 2
        assert report.per_cwe["CWE-79"].exact_matches == 1
        assert report.per_cwe["CWE-89"].exact_matches == 1
        assert "CWE-22" not in report.per_cwe  # errored row never reaches scoring

    def test_deterministic_recompute_is_bit_for_bit(self):
        rows = make_rows([
            ("Vulnerable - CWE-79", "Vulnerable - CWE-79", None),
            ("Secure", "Secure", None),
            ("Secure", "garbled", None),
        ])
        first = rescore(rows, {"seed": 1})
        again = rescore(rows_from_dicts(rows_to_dicts(list(first.rows))), {"seed": 1})
        assert first == again

    def test_row_order_normalized_by_index(self):
        rows = make_rows([
            ("Vulnerable - CWE-79", "Vulnerable - CWE-79", None),
            ("Secure", "Secure", None),
        ])
        assert rescore(list(reversed(rows)), {}) == rescore(rows, {})


class TestRunEval:
    def gold_responder(self, instances):
        answers = {}
        for inst in instances:
            answers[inst.input] = inst.output

        def respond(prompt):
            for code, answer in answers.items():
                if code in prompt:
                    return answer
            raise AssertionError("prompt did not embed a known snippet")

        return respond

    def make_instances(self):
        return [
            LabeledInstance(instruction="check", input="a = source()\n",
                            output="Vulnerable - CWE-89"),
            LabeledInstance(instruction="check", input="b = sanitize(source())\n",
                            output="Secure"),
            LabeledInstance(instruction="check", input="c = source()\n",
                            output="Vulnerable - CWE-79"),
        ]

    def test_perfect_run(self):
        instances = self.make_instances()
        backend = ResponderBackend(self.gold_responder(instances))
        report = run_eval(backend, instances, "check")
        assert report.matrix.tp == 2
        assert report.matrix.tn == 1
        assert report.exact_matches == 3
        assert report.metrics.accuracy == 1.0
        assert report.metadata["mode"] == "model"
        assert report.metadata["sampling"] == {"temperature": 0.0}
        assert report.metadata["instruction_digest"] == instruction_digest("check")

    def test_failures_within_bound_become_error_rows(self):
        instances = self.make_instances()

        class FlakyBackend(ResponderBackend):
            def complete(self, request):
                if "b = " in request.prompt:
                    raise BackendTransportError("socket closed", elapsed=0.1)
                return super().complete(request)

        backend = FlakyBackend(lambda p: "Secure")
        report = run_eval(backend, instances, "check", max_error_rate=0.5)
        assert report.errors == 1
        assert report.matrix.total == 2  # errored instance excluded from the matrix

    def test_failure_rate_above_bound_aborts(self):
        instances = self.make_instances()

        class DeadBackend(ResponderBackend):
            def complete(self, request):
                raise BackendTransportError("down", elapsed=0.0)

        with pytest.raises(EvalRunError, match="error bound"):
            run_eval(DeadBackend(lambda p: ""), instances, "check")

    def test_concurrency_matches_sequential(self):
        instances = self.make_instances() * 4
        backend_a = ResponderBackend(self.gold_responder(instances))
        backend_b = ResponderBackend(self.gold_responder(instances))
        seq = run_eval(backend_a, instances, "check", concurrency=1, timestamp="t")
        par = run_eval(backend_b, instances, "check", concurrency=4, timestamp="t")
        assert seq.matrix == par.matrix
        assert [r.raw for r in seq.rows] == [r.raw for r in par.rows]

    def test_empty_instance_list_rejected(self):
        with pytest.raises(EvalRunError, match="no instances"):
            run_eval(ResponderBackend(lambda p: ""), [], "check")

    def test_unparseable_is_negative_prediction(self):
        instances = self.make_instances()
        backend = ResponderBackend(lambda p: "def continuation():\n    pass")
        report = run_eval(backend, instances, "check")
        assert report.matrix.tp == 0
        assert report.matrix.fp == 0
        assert report.unparseable == 3


class TestFormatSummary:
    def test_table_and_flags(self):
        rows = make_rows([("Vulnerable - CWE-79", "Vulnerable - CWE-79", None),
                          ("Secure", "Secure", None)])
        text = format_summary(rescore(rows, {"mode": "model"}))
        assert "Accuracy" in text
        assert "100.00%" in text
        assert "Metric" in text

    def test_undefined_metric_labelled(self):
        rows = make_rows([("Secure", "Secure", None)])
        text = format_summary(rescore(rows, {"mode": "baseline"}))
        assert "undefined" in text
        assert "Mode: baseline" in text
