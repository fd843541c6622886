"""Inference latency measurement over client-observed timing traces.

Definitions used throughout:
  TTFT              first token arrival minus request send, per request.
  inter-token gap   difference between consecutive arrivals within a request.
  TPS               decode throughput: tokens after each request's first one,
                    divided by the summed decode time (last minus first
                    arrival), pooled across requests.
  percentile        nearest-rank on the sorted sample (index ceil(p/100 * n),
                    1-based); no interpolation.

Latency percentiles are computed over inter-token gaps pooled across the
measured requests, so P50 is the median gap, not a request-level duration.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .backend import Backend, BackendError, CompletionRequest, TimingTrace
from .errors import CwekitError

INTERPRETATION = ("latency percentiles are nearest-rank over inter-token gaps pooled "
                  "across measured requests; a token is one streamed chunk")


class BenchError(CwekitError):
    pass


def ttft(trace: TimingTrace) -> float:
    """Time to first token for one request."""
    if not trace.token_arrivals:
        raise BenchError("trace has no token arrivals")
    return trace.token_arrivals[0] - trace.request_sent_at


def inter_token_latencies(trace: TimingTrace) -> list[float]:
    """Consecutive arrival gaps; a trace with fewer than two tokens has none."""
    arrivals = trace.token_arrivals
    return [b - a for a, b in zip(arrivals, arrivals[1:])]


def tokens_per_second(traces: Sequence[TimingTrace]) -> float:
    """Pooled decode throughput; single-token traces do not qualify."""
    qualifying = [t for t in traces if t.token_count >= 2]
    if not qualifying:
        raise BenchError("tokens_per_second needs at least one trace with two or more tokens")
    tokens = sum(t.token_count - 1 for t in qualifying)
    elapsed = sum(t.token_arrivals[-1] - t.token_arrivals[0] for t in qualifying)
    if elapsed <= 0:
        raise BenchError("decode time is zero across all qualifying traces")
    return tokens / elapsed


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile of a non-empty sample, 0 < p <= 100."""
    if not values:
        raise BenchError("percentile of an empty sample is undefined")
    if not 0 < p <= 100:
        raise BenchError(f"percentile must be in (0, 100], got {p}")
    ordered = sorted(values)
    # Exact rank arithmetic: float p/100*n can land a hair past an integer
    # boundary (95% of 20 must be rank 19, not 20).
    rank = math.ceil(Fraction(p) * len(ordered) / 100)
    return ordered[rank - 1]


@dataclass(frozen=True)
class BenchConfig:
    prompts: tuple[str, ...]
    warmup_requests: int = 1
    measured_requests: int = 5
    max_new_tokens: int = 64
    failure_tolerance: int = 0  # measured requests allowed to fail
    host_description: str = ""

    def __post_init__(self) -> None:
        if not self.prompts:
            raise BenchError("at least one prompt is required")
        if self.warmup_requests < 0:
            raise BenchError("warmup_requests must be >= 0")
        if self.measured_requests < 1:
            raise BenchError("measured_requests must be >= 1")
        if self.max_new_tokens < 1:
            raise BenchError("max_new_tokens must be >= 1")
        if self.failure_tolerance < 0:
            raise BenchError("failure_tolerance must be >= 0")
        object.__setattr__(self, "prompts", tuple(self.prompts))


@dataclass(frozen=True)
class BenchReport:
    ttft_per_request: tuple[float, ...]
    ttft_median: float
    tokens_per_second: float
    latency_p50: float
    latency_p95: float
    latency_p99: float
    environment: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "interpretation": INTERPRETATION,
            "ttft_seconds": {"per_request": list(self.ttft_per_request),
                             "median": self.ttft_median},
            "tokens_per_second": self.tokens_per_second,
            "latency_seconds": {"p50": self.latency_p50, "p95": self.latency_p95,
                                "p99": self.latency_p99},
            "environment": dict(self.environment),
        }


def run_bench(backend: Backend, config: BenchConfig) -> BenchReport:
    """Warm up, then measure strictly sequential requests and aggregate.

    Warmup traces are discarded. Failures beyond config.failure_tolerance
    abort the run; tolerated failures are counted in the report environment,
    never dropped silently.
    """
    def prompt_for(i: int) -> str:
        return config.prompts[i % len(config.prompts)]

    def request_for(i: int) -> CompletionRequest:
        return CompletionRequest(prompt=prompt_for(i),
                                 max_new_tokens=config.max_new_tokens, stream=True)

    for i in range(config.warmup_requests):
        try:
            backend.complete(request_for(i))
        except BackendError as exc:
            raise BenchError(f"warmup request {i} failed: {exc}") from exc

    traces: list[TimingTrace] = []
    failures: list[str] = []
    started = time.monotonic()
    for i in range(config.measured_requests):
        try:
            result = backend.complete(request_for(i))
        except BackendError as exc:
            failures.append(f"request {i}: {exc}")
            if len(failures) > config.failure_tolerance:
                raise BenchError(
                    f"{len(failures)} measured request(s) failed, above the tolerance of "
                    f"{config.failure_tolerance}: " + "; ".join(failures)) from exc
            continue
        if result.trace.token_count == 0:
            failures.append(f"request {i}: completed with zero tokens")
            if len(failures) > config.failure_tolerance:
                raise BenchError(
                    f"{len(failures)} measured request(s) failed, above the tolerance of "
                    f"{config.failure_tolerance}: " + "; ".join(failures))
            continue
        traces.append(result.trace)
    wall = time.monotonic() - started

    if not traces:
        raise BenchError("no measured request produced a trace")
    ttfts = tuple(ttft(t) for t in traces)
    pooled: list[float] = []
    for t in traces:
        pooled.extend(inter_token_latencies(t))
    if not pooled:
        raise BenchError("all measured requests streamed a single token; "
                         "latency statistics are undefined")

    environment = {
        "backend": getattr(backend, "id", "unknown"),
        "host": config.host_description,
        "warmup_requests": config.warmup_requests,
        "measured_requests": config.measured_requests,
        "failed_requests": len(failures),
        "failures": failures,
        "tokens_streamed": sum(t.token_count for t in traces),
        "max_new_tokens": config.max_new_tokens,
        "wall_time_seconds": wall,
    }
    return BenchReport(
        ttft_per_request=ttfts,
        ttft_median=percentile(ttfts, 50),
        tokens_per_second=tokens_per_second(traces),
        latency_p50=percentile(pooled, 50),
        latency_p95=percentile(pooled, 95),
        latency_p99=percentile(pooled, 99),
        environment=environment,
    )


def format_bench_table(report: BenchReport) -> str:
    rows = [
        ("Time to First Token (TTFT)", f"{report.ttft_median:.3f} seconds"),
        ("Tokens per Second (TPS)", f"{report.tokens_per_second:.2f} tokens/sec"),
        ("Median Latency (P50)", f"{report.latency_p50:.3f} seconds"),
        ("P95 Latency", f"{report.latency_p95:.3f} seconds"),
        ("P99 Latency", f"{report.latency_p99:.3f} seconds"),
    ]
    width = max(len(name) for name, _ in rows) + 2
    lines = [f"{name:<{width}}{value}" for name, value in rows]
    env = report.environment
    lines.append("")
    lines.append(f"Requests: {env['measured_requests']} measured, "
                 f"{env['warmup_requests']} warmup, {env['failed_requests']} failed")
    if env.get("host"):
        lines.append(f"Host: {env['host']}")
    lines.append(f"Note: {INTERPRETATION}")
    return "\n".join(lines)
