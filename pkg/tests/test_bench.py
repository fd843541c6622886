from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwekit.backend import (
    BackendTransportError,
    CompletionRequest,
    ScriptedBackend,
    TimingTrace,
)
from cwekit.bench import (
    BenchConfig,
    BenchError,
    format_bench_table,
    inter_token_latencies,
    percentile,
    run_bench,
    tokens_per_second,
    ttft,
)


def trace(sent, arrivals):
    return TimingTrace(request_sent_at=sent, token_arrivals=tuple(arrivals))


class TestTtft:
    def test_first_arrival_minus_send(self):
        assert ttft(trace(1.0, [1.25, 1.4])) == pytest.approx(0.25)

    def test_no_arrivals(self):
        with pytest.raises(BenchError):
            ttft(trace(1.0, []))


class TestInterTokenLatencies:
    def test_consecutive_gaps(self):
        gaps = inter_token_latencies(trace(0.0, [0.3, 0.4, 0.6]))
        assert gaps == pytest.approx([0.1, 0.2])

    def test_single_token_has_none(self):
        assert inter_token_latencies(trace(0.0, [0.3])) == []


class TestTokensPerSecond:
    def test_single_trace(self):
        # 61 tokens, 60 gaps of 166.4 ms: 60 / 9.984 s.
        arrivals = [0.253 + i * 0.1664 for i in range(61)]
        tps = tokens_per_second([trace(0.0, arrivals)])
        assert tps == pytest.approx(60 / 9.984)
        assert tps == pytest.approx(6.01, rel=2e-3)

    def test_pooled_over_traces(self):
        a = trace(0.0, [1.0, 1.5, 2.0])  # 2 decode tokens over 1.0 s
        b = trace(0.0, [1.0, 1.5])       # 1 decode token over 0.5 s
        assert tokens_per_second([a, b]) == pytest.approx(3 / 1.5)

    def test_single_token_traces_excluded(self):
        a = trace(0.0, [1.0, 2.0])
        lone = trace(0.0, [5.0])
        assert tokens_per_second([a, lone]) == tokens_per_second([a])

    def test_all_single_token_is_an_error(self):
        with pytest.raises(BenchError, match="two or more"):
            tokens_per_second([trace(0.0, [1.0]), trace(0.0, [2.0])])

    def test_zero_decode_time_is_an_error(self):
        with pytest.raises(BenchError, match="zero"):
            tokens_per_second([trace(0.0, [1.0, 1.0])])


def oracle_percentile(values, p):
    """Smallest value v such that at least p% of the sample is <= v.

    Counts upward through the sorted sample instead of computing a rank, with
    exact arithmetic on p's value.
    """
    ordered = sorted(values)
    need = Fraction(p) * len(ordered) / 100
    count = 0
    for v in ordered:
        count += 1
        if count >= need:
            return v
    return ordered[-1]


class TestPercentile:
    def test_worked_example(self):
        assert percentile([10, 20, 30, 40], 50) == 20

    def test_order_does_not_matter(self):
        assert percentile([40, 10, 30, 20], 50) == 20

    @pytest.mark.parametrize("p,expected", [
        (1, 10), (25, 10), (26, 20), (50, 20), (75, 30), (99, 40), (100, 40),
    ])
    def test_nearest_rank_on_four_values(self, p, expected):
        assert percentile([10, 20, 30, 40], p) == expected

    def test_single_value(self):
        assert percentile([7.5], 50) == 7.5
        assert percentile([7.5], 99) == 7.5

    def test_exact_boundary_rank(self):
        # 95% of 20 values is exactly rank 19; float rounding must not bump it.
        values = list(range(1, 21))
        assert percentile(values, 95) == 19
        assert percentile(values, 5) == 1
        assert percentile(values, 10) == 2

    def test_empty_sample_rejected(self):
        with pytest.raises(BenchError):
            percentile([], 50)

    @pytest.mark.parametrize("p", [0, -5, 100.1, 101])
    def test_out_of_range_p_rejected(self, p):
        with pytest.raises(BenchError):
            percentile([1.0], p)

    @settings(max_examples=200)
    @given(values=st.lists(st.integers(-1000, 1000), min_size=1, max_size=1000),
           p=st.one_of(st.integers(1, 100),
                       st.floats(min_value=0.5, max_value=100.0,
                                 allow_nan=False, allow_infinity=False)))
    def test_matches_counting_oracle(self, values, p):
        assert percentile(values, p) == oracle_percentile(values, p)


class TestBenchConfig:
    def test_validation(self):
        with pytest.raises(BenchError):
            BenchConfig(prompts=())
        with pytest.raises(BenchError):
            BenchConfig(prompts=("p",), warmup_requests=-1)
        with pytest.raises(BenchError):
            BenchConfig(prompts=("p",), measured_requests=0)
        with pytest.raises(BenchError):
            BenchConfig(prompts=("p",), failure_tolerance=-1)


REFERENCE_SCRIPT = {"tokens": ["t"] * 61, "first_delay_ms": 253, "gap_ms": 166.4}


class TestRunBench:
    def test_reference_statistics(self):
        backend = ScriptedBackend([REFERENCE_SCRIPT])
        config = BenchConfig(prompts=("p",), warmup_requests=1, measured_requests=5,
                             max_new_tokens=64)
        report = run_bench(backend, config)
        assert report.ttft_median == pytest.approx(0.253, abs=1e-9)
        assert report.tokens_per_second == pytest.approx(6.0096, abs=5e-4)
        assert report.latency_p50 == pytest.approx(0.1664, abs=1e-9)
        assert report.latency_p95 == pytest.approx(0.1664, abs=1e-9)
        assert report.latency_p99 == pytest.approx(0.1664, abs=1e-9)
        assert report.environment["tokens_streamed"] == 5 * 61
        assert len(report.ttft_per_request) == 5

    def test_warmup_discarded(self):
        slow_then_fast = [
            {"tokens": ["a", "b"], "first_delay_ms": 5000, "gap_ms": 5000},
            {"tokens": ["a", "b"], "first_delay_ms": 100, "gap_ms": 50},
            {"tokens": ["a", "b"], "first_delay_ms": 100, "gap_ms": 50},
        ]
        backend = ScriptedBackend(slow_then_fast)
        config = BenchConfig(prompts=("p",), warmup_requests=1, measured_requests=2)
        report = run_bench(backend, config)
        assert report.ttft_median == pytest.approx(0.1)
        assert max(report.ttft_per_request) < 1.0

    def test_max_new_tokens_caps_stream(self):
        backend = ScriptedBackend([REFERENCE_SCRIPT])
        config = BenchConfig(prompts=("p",), warmup_requests=0, measured_requests=1,
                             max_new_tokens=5)
        report = run_bench(backend, config)
        assert report.environment["tokens_streamed"] == 5

    def test_warmup_failure_aborts(self):
        class DeadBackend:
            id = "dead"

            def complete(self, request):
                raise BackendTransportError("refused", elapsed=0.0)

        config = BenchConfig(prompts=("p",), warmup_requests=1, measured_requests=1)
        with pytest.raises(BenchError, match="warmup"):
            run_bench(DeadBackend(), config)

    def test_measured_failures_above_tolerance_abort(self):
        class FlakyBackend:
            id = "flaky"

            def __init__(self):
                self.calls = 0
                self.inner = ScriptedBackend([REFERENCE_SCRIPT])

            def complete(self, request):
                self.calls += 1
                if self.calls % 2 == 0:
                    raise BackendTransportError("reset", elapsed=0.0)
                return self.inner.complete(request)

        config = BenchConfig(prompts=("p",), warmup_requests=1, measured_requests=4,
                             failure_tolerance=0)
        with pytest.raises(BenchError, match="above the tolerance"):
            run_bench(FlakyBackend(), config)

    def test_tolerated_failures_are_reported(self):
        class FlakyBackend:
            id = "flaky"

            def __init__(self):
                self.calls = 0
                self.inner = ScriptedBackend([REFERENCE_SCRIPT])

            def complete(self, request):
                self.calls += 1
                if self.calls == 3:  # second measured request
                    raise BackendTransportError("reset", elapsed=0.0)
                return self.inner.complete(request)

        config = BenchConfig(prompts=("p",), warmup_requests=1, measured_requests=4,
                             failure_tolerance=1)
        report = run_bench(FlakyBackend(), config)
        assert report.environment["failed_requests"] == 1
        assert len(report.ttft_per_request) == 3
        assert report.environment["failures"]

    def test_all_single_token_streams_rejected(self):
        backend = ScriptedBackend([{"tokens": ["only"]}])
        config = BenchConfig(prompts=("p",), warmup_requests=0, measured_requests=3)
        with pytest.raises(BenchError, match="single token"):
            run_bench(backend, config)


class TestFormatBenchTable:
    def test_rows_present(self):
        backend = ScriptedBackend([REFERENCE_SCRIPT])
        config = BenchConfig(prompts=("p",), warmup_requests=1, measured_requests=5,
                             host_description="test rig")
        table = format_bench_table(run_bench(backend, config))
        assert "Time to First Token (TTFT)" in table
        assert "Tokens per Second (TPS)" in table
        assert "Median Latency (P50)" in table
        assert "P95 Latency" in table
        assert "P99 Latency" in table
        assert "6.01 tokens/sec" in table
        assert "0.253 seconds" in table
        assert "Host: test rig" in table
        assert "Note:" in table
