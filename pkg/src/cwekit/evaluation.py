"""Scoring model outputs against gold labels.

Model text is parsed with a short, fixed cascade of rules; the parse is total,
so scoring never throws on weird output. Binary metrics treat any vulnerable
claim as the positive class; unparseable output counts as a negative-side
prediction, never as a positive.
"""

from __future__ import annotations

import hashlib
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from .backend import Backend, BackendError, CompletionRequest, assemble_prompt
from .catalog import CweId
from .dataset import LabeledInstance, LabelError, Verdict, parse_label_strict, iso_now
from .errors import CwekitError


class EvalRunError(CwekitError):
    pass


# ---------------------------------------------------------------------------
# Output parsing

SECURE = "secure"
VULNERABLE = "vulnerable"
UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class ParsedOutput:
    """Model output reduced to a verdict claim.

    kind is secure/vulnerable/unparseable; cwe is set for vulnerable claims
    that named a parseable id, None for bare "vulnerable" claims. rule records
    which cascade step matched (1 strict .. 5 unparseable).
    """

    kind: str
    cwe: CweId | None
    rule: int


_WORD_SECURE = re.compile(r"\bsecure\b", re.IGNORECASE)
_WORD_VULNERABLE = re.compile(r"\bvulnerable\b", re.IGNORECASE)
_ANY_CWE = re.compile(r"cwe[\s_-]*0*([0-9]+)", re.IGNORECASE)


def parse_model_output(text: str) -> ParsedOutput:
    """Total parse of raw model text; never raises."""
    if not isinstance(text, str):
        return ParsedOutput(kind=UNPARSEABLE, cwe=None, rule=5)
    try:
        verdict = parse_label_strict(text)
        if verdict.is_vulnerable:
            return ParsedOutput(kind=VULNERABLE, cwe=verdict.cwe, rule=1)
        return ParsedOutput(kind=SECURE, cwe=None, rule=1)
    except LabelError:
        pass

    lines = [line for line in text.splitlines() if line.strip()]
    first = lines[0] if lines else ""
    head = "\n".join(lines[:2])

    if _WORD_SECURE.search(first):
        return ParsedOutput(kind=SECURE, cwe=None, rule=2)
    if _WORD_VULNERABLE.search(head):
        for m in _ANY_CWE.finditer(head):
            number = int(m.group(1))
            if number >= 1:
                return ParsedOutput(kind=VULNERABLE, cwe=CweId(number), rule=3)
        return ParsedOutput(kind=VULNERABLE, cwe=None, rule=4)
    return ParsedOutput(kind=UNPARSEABLE, cwe=None, rule=5)


def score_prediction(gold: Verdict, parsed: ParsedOutput) -> tuple[str, bool]:
    """Map one (gold, prediction) to a confusion cell and exact-match flag."""
    predicted_positive = parsed.kind == VULNERABLE
    if gold.is_vulnerable:
        cell = "tp" if predicted_positive else "fn"
        exact = predicted_positive and parsed.cwe == gold.cwe
    else:
        cell = "fp" if predicted_positive else "tn"
        exact = parsed.kind == SECURE
    return cell, exact


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise EvalRunError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    """None means the metric is undefined (zero denominator), not zero."""

    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None


def compute_metrics(matrix: ConfusionMatrix) -> Metrics:
    if matrix.total == 0:
        raise EvalRunError("cannot compute metrics for an empty confusion matrix")
    accuracy = (matrix.tp + matrix.tn) / matrix.total
    precision = matrix.tp / (matrix.tp + matrix.fp) if matrix.tp + matrix.fp else None
    recall = matrix.tp / (matrix.tp + matrix.fn) if matrix.tp + matrix.fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(accuracy=accuracy, precision=precision, recall=recall, f1=f1)


# ---------------------------------------------------------------------------
# Eval runs


@dataclass(frozen=True)
class EvalRow:
    """One instance's raw outcome; everything scoring needs to run again."""

    index: int
    gold: str  # canonical label
    raw: str | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if (self.raw is None) == (self.error is None):
            raise EvalRunError("row must carry exactly one of raw output or error")
        parse_label_strict(self.gold)


@dataclass(frozen=True)
class PerCweStats:
    instances: int
    exact_matches: int


@dataclass(frozen=True)
class EvalReport:
    matrix: ConfusionMatrix
    metrics: Metrics
    per_cwe: Mapping[str, PerCweStats]
    unparseable: int
    errors: int
    exact_matches: int
    total: int
    metadata: Mapping[str, object]
    rows: tuple[EvalRow, ...]

    def to_dict(self, include_rows: bool = False) -> dict:
        out = {
            "schema_version": 1,
            "matrix": {"tp": self.matrix.tp, "fp": self.matrix.fp,
                       "fn": self.matrix.fn, "tn": self.matrix.tn},
            "metrics": {"accuracy": self.metrics.accuracy,
                        "precision": self.metrics.precision,
                        "recall": self.metrics.recall,
                        "f1": self.metrics.f1},
            "per_cwe": {cwe: {"instances": s.instances, "exact_matches": s.exact_matches}
                        for cwe, s in sorted(self.per_cwe.items())},
            "unparseable": self.unparseable,
            "errors": self.errors,
            "exact_matches": self.exact_matches,
            "total": self.total,
            "metadata": dict(self.metadata),
        }
        if include_rows:
            out["rows"] = rows_to_dicts(self.rows)
        return out


def rows_to_dicts(rows: Sequence[EvalRow]) -> list[dict]:
    return [
        {"index": r.index, "gold": r.gold, "raw": r.raw, "error": r.error}
        for r in rows
    ]


def rows_from_dicts(records: Sequence[dict]) -> list[EvalRow]:
    rows = []
    for i, rec in enumerate(records):
        try:
            rows.append(EvalRow(index=rec["index"], gold=rec["gold"],
                                raw=rec.get("raw"), error=rec.get("error")))
        except (KeyError, TypeError, CwekitError) as exc:
            raise EvalRunError(f"raw output record {i}: {exc}") from exc
    return rows


def rescore(rows: Sequence[EvalRow], metadata: Mapping[str, object]) -> EvalReport:
    """Rebuild a full report from persisted raw outputs. Deterministic."""
    ordered = sorted(rows, key=lambda r: r.index)
    cells = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    unparseable = 0
    errors = 0
    exact_total = 0
    per_cwe: dict[str, list[int]] = {}

    for row in ordered:
        gold = parse_label_strict(row.gold)
        if row.error is not None:
            errors += 1
            continue
        parsed = parse_model_output(row.raw)
        if parsed.kind == UNPARSEABLE:
            unparseable += 1
        cell, exact = score_prediction(gold, parsed)
        cells[cell] += 1
        exact_total += int(exact)
        if gold.is_vulnerable:
            stats = per_cwe.setdefault(gold.cwe.canonical, [0, 0])
            stats[0] += 1
            stats[1] += int(exact)

    matrix = ConfusionMatrix(**cells)
    if matrix.total:
        metrics = compute_metrics(matrix)
    else:
        metrics = Metrics(None, None, None, None)
    return EvalReport(
        matrix=matrix,
        metrics=metrics,
        per_cwe={cwe: PerCweStats(*counts) for cwe, counts in per_cwe.items()},
        unparseable=unparseable,
        errors=errors,
        exact_matches=exact_total,
        total=len(ordered),
        metadata=dict(metadata),
        rows=tuple(ordered),
    )


def instruction_digest(instruction: str) -> str:
    return hashlib.sha256(instruction.encode("utf-8")).hexdigest()[:16]


def run_eval(backend: Backend, instances: Sequence[LabeledInstance], instruction: str, *,
             max_new_tokens: int = 32, sampling: Mapping[str, object] | None = None,
             concurrency: int = 1, max_error_rate: float = 0.0, seed: int = 0,
             mode: str = "model", timestamp: str | None = None) -> EvalReport:
    """Run the detector over a labelled set and score it.

    Decoding defaults to greedy. Backend failures are recorded per instance;
    the run only fails when the failure fraction exceeds max_error_rate.
    """
    if not instances:
        raise EvalRunError("no instances to evaluate")
    if concurrency < 1:
        raise EvalRunError(f"concurrency must be >= 1, got {concurrency}")
    effective_sampling = dict(sampling) if sampling is not None else {"temperature": 0.0}

    def one(indexed: tuple[int, LabeledInstance]) -> EvalRow:
        index, inst = indexed
        prompt = assemble_prompt(instruction, inst.input)
        request = CompletionRequest(prompt=prompt, max_new_tokens=max_new_tokens,
                                    sampling=effective_sampling, stream=True)
        try:
            result = backend.complete(request)
            return EvalRow(index=index, gold=inst.output, raw=result.text)
        except BackendError as exc:
            return EvalRow(index=index, gold=inst.output, error=str(exc))

    work = list(enumerate(instances))
    if concurrency == 1:
        rows = [one(item) for item in work]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            rows = list(pool.map(one, work))

    failed = [r for r in rows if r.error is not None]
    if len(failed) / len(rows) > max_error_rate:
        examples = "; ".join(f"#{r.index}: {r.error}" for r in failed[:3])
        raise EvalRunError(
            f"{len(failed)}/{len(rows)} instances failed, above the "
            f"{max_error_rate:.0%} error bound ({examples})")

    metadata = {
        "backend": getattr(backend, "id", "unknown"),
        "instruction_digest": instruction_digest(instruction),
        "seed": seed,
        "timestamp": timestamp or iso_now(),
        "mode": mode,
        "max_new_tokens": max_new_tokens,
        "sampling": effective_sampling,
    }
    return rescore(rows, metadata)


# ---------------------------------------------------------------------------
# Presentation


def _pct(value: float | None) -> str:
    return "undefined" if value is None else f"{value * 100:.2f}%"


def format_summary(report: EvalReport) -> str:
    m = report.matrix
    lines = [
        f"Instances scored: {report.total - report.errors}/{report.total}"
        + (f"  (backend errors: {report.errors})" if report.errors else ""),
        f"Confusion matrix: TP={m.tp} FP={m.fp} FN={m.fn} TN={m.tn}",
        f"Unparseable outputs: {report.unparseable}",
        f"Exact-label matches: {report.exact_matches}/{report.total - report.errors}",
    ]
    if report.metadata.get("mode") not in (None, "model"):
        lines.insert(0, f"Mode: {report.metadata['mode']}")
    lines += [
        "",
        "Metric       Value",
        f"Accuracy     {_pct(report.metrics.accuracy)}",
        f"Precision    {_pct(report.metrics.precision)}",
        f"Recall       {_pct(report.metrics.recall)}",
        f"F1-Score     {_pct(report.metrics.f1)}",
    ]
    return "\n".join(lines)
