"""Semi-supervised pair generation: prompt a teacher model for vulnerable and
fixed snippet pairs, validate them statically, and queue survivors for review.

Every candidate is parsed, syntax-checked (parse only, never executed), and
either kept or rejected with a reason; nothing in a response is silently
dropped. Retries re-request only the shortfall and echo the previous
rejection reasons so the teacher can correct course.
"""

from __future__ import annotations

import ast
import json
import re
import string
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path
from typing import Protocol, Sequence

from . import backend as backend_mod
from .catalog import CweEntry, CweId
from .dataset import PairedExample, Provenance, ReviewState, Snippet, iso_now
from .errors import CwekitError


class GenerationError(CwekitError):
    pass


class TemplateError(GenerationError):
    pass


class GenerationParseError(GenerationError):
    """The whole response could not be read as pair records."""

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


# ---------------------------------------------------------------------------
# Syntax gate


@dataclass(frozen=True)
class SyntaxIssue:
    line: int
    message: str


def syntax_check(code: str) -> SyntaxIssue | None:
    """Parse the snippet with the host grammar; None means it is valid.

    Static only: the snippet is never imported or executed.
    """
    try:
        ast.parse(code)
    except SyntaxError as exc:
        return SyntaxIssue(line=exc.lineno or 0, message=exc.msg or "invalid syntax")
    except ValueError as exc:  # e.g. source with null bytes
        return SyntaxIssue(line=0, message=str(exc))
    return None


# ---------------------------------------------------------------------------
# Prompt templates

_ALLOWED_PLACEHOLDERS = {"cwe_id", "cwe_name", "cwe_summary", "pair_count"}
_REQUIRED_PLACEHOLDERS = {"cwe_id", "pair_count"}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def version(self) -> str:
        digest = sha256(self.body.encode("utf-8")).hexdigest()[:8]
        return f"{self.name}-{digest}"

    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.body) if f}


DEFAULT_TEMPLATE = PromptTemplate(
    name="pairgen",
    body=(
        "You are helping build a dataset of Python security weaknesses.\n"
        "Weakness under study: {cwe_id} ({cwe_name}). {cwe_summary}\n"
        "\n"
        "Produce exactly {pair_count} pair(s) of short, realistic Python snippets.\n"
        "Each pair must contain:\n"
        "  - \"vulnerable\": a snippet exhibiting {cwe_id} as it would occur in real code\n"
        "    (plausible identifiers, no toy names like foo/bar, no comments that\n"
        "    point at the flaw),\n"
        "  - \"fixed\": the same snippet with the weakness remediated and nothing\n"
        "    else changed gratuitously,\n"
        "  - \"note\": one sentence on what makes the vulnerable version unsafe.\n"
        "Vary the scenario between pairs: different APIs, different entry points.\n"
        "Both snippets must parse as standalone Python and must differ from each\n"
        "other.\n"
        "\n"
        "Respond with a JSON array only, no prose before or after:\n"
        "[{{\"vulnerable\": \"...\", \"fixed\": \"...\", \"note\": \"...\"}}]\n"
    ),
)


def render_prompt(template: PromptTemplate, cwe: CweEntry, pair_count: int,
                  feedback: Sequence[str] = ()) -> str:
    """Render the generation prompt. Deterministic for identical arguments.

    Feedback lines (rejection reasons from a previous attempt) are appended
    verbatim so a retry can steer the teacher away from repeat mistakes.
    """
    if pair_count < 1:
        raise GenerationError(f"pair_count must be >= 1, got {pair_count}")
    fields = template.placeholders()
    unknown = fields - _ALLOWED_PLACEHOLDERS
    if unknown:
        raise TemplateError(f"template {template.name!r} has unknown placeholder(s) "
                            f"{sorted(unknown)}")
    missing = _REQUIRED_PLACEHOLDERS - fields
    if missing:
        raise TemplateError(f"template {template.name!r} must reference "
                            f"{sorted('{' + m + '}' for m in missing)}")
    prompt = template.body.format(
        cwe_id=cwe.id.canonical,
        cwe_name=cwe.name,
        cwe_summary=cwe.summary,
        pair_count=pair_count,
    )
    if feedback:
        lines = "\n".join(f"- {reason}" for reason in feedback)
        prompt += f"\nYour previous attempt had these problems; avoid them:\n{lines}\n"
    return prompt


# ---------------------------------------------------------------------------
# Response parsing


@dataclass(frozen=True)
class Rejection:
    index: int  # position of the record in the raw response
    reason: str


@dataclass(frozen=True)
class GenerationParse:
    candidates: tuple[PairedExample, ...]
    rejections: tuple[Rejection, ...]


def _extract_records(raw_text: str):
    attempts = []
    fence = re.search(r"```(?:json)?\s*(.*?)```", raw_text, re.DOTALL)
    if fence:
        attempts.append(fence.group(1))
    attempts.append(raw_text)
    start, end = raw_text.find("["), raw_text.rfind("]")
    if 0 <= start < end:
        attempts.append(raw_text[start:end + 1])
    for text in attempts:
        try:
            data = json.loads(text.strip())
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict) and isinstance(data.get("pairs"), list):
            return data["pairs"]
        if isinstance(data, list):
            return data
    return None


def parse_generation(raw_text: str, cwe: CweId, *, backend_id: str,
                     template_version: str, generated_at: str | None = None) -> GenerationParse:
    """Turn one raw teacher response into pending candidates plus rejections.

    Raises GenerationParseError when no pair records can be read at all;
    otherwise every record in the response lands in exactly one of the two
    output lists.
    """
    records = _extract_records(raw_text)
    if records is None:
        raise GenerationParseError(
            f"response for {cwe} is not parseable as pair records", raw_text=raw_text)
    provenance = Provenance(
        backend=backend_id,
        template_version=template_version,
        generated_at=generated_at or iso_now(),
    )
    candidates: list[PairedExample] = []
    rejections: list[Rejection] = []
    for index, record in enumerate(records):
        reason = _vet_record(record)
        if reason is not None:
            rejections.append(Rejection(index=index, reason=reason))
            continue
        candidates.append(PairedExample(
            cwe=cwe,
            vulnerable=Snippet(record["vulnerable"]),
            fixed=Snippet(record["fixed"]),
            provenance=provenance,
            review_state=ReviewState(),
        ))
    return GenerationParse(candidates=tuple(candidates), rejections=tuple(rejections))


def _vet_record(record) -> str | None:
    if not isinstance(record, dict):
        return "record is not an object"
    for side in ("vulnerable", "fixed"):
        code = record.get(side)
        if not isinstance(code, str) or not code.strip():
            return f"empty snippet ({side})"
    if record["vulnerable"] == record["fixed"]:
        return "pair not distinct"
    for side in ("vulnerable", "fixed"):
        issue = syntax_check(record[side])
        if issue is not None:
            return f"{side} snippet syntax error at line {issue.line}: {issue.message}"
    return None


# ---------------------------------------------------------------------------
# Generation backends


class GenerationBackend(Protocol):
    id: str

    def generate_text(self, prompt: str) -> str: ...


class HttpGenerationBackend:
    """Teacher over the completion wire protocol, sampled for diversity."""

    def __init__(self, base_url: str, adapter: str = "native", *,
                 temperature: float = 0.9, max_new_tokens: int = 2048,
                 timeout: float = 120.0, api_key: str | None = None):
        self._backend = backend_mod.HttpBackend(
            base_url, adapter=adapter, timeout=timeout, api_key=api_key)
        self._sampling = {"temperature": temperature}
        self._max_new_tokens = max_new_tokens
        self.id = self._backend.id

    def generate_text(self, prompt: str) -> str:
        request = backend_mod.CompletionRequest(
            prompt=prompt, max_new_tokens=self._max_new_tokens,
            sampling=self._sampling, stream=False)
        return self._backend.complete(request).text


_FIXTURE_NAME_RE = re.compile(r"^(CWE-\d+)\.(\d+)\.txt$")
_PROMPT_CWE_RE = re.compile(r"CWE-(\d+)")


class FixtureBackend:
    """Replays canned teacher responses from a directory.

    Files are named <CWE>.<attempt>.txt, e.g. CWE-79.0.txt for the first
    attempt. When attempts outnumber files for a CWE the last file repeats,
    so a single canned response also covers retry loops.
    """

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._files: dict[str, list[Path]] = {}
        for file in sorted(self._path.glob("CWE-*.txt")):
            m = _FIXTURE_NAME_RE.match(file.name)
            if m:
                self._files.setdefault(m.group(1), []).append(file)
        for files in self._files.values():
            files.sort(key=lambda f: int(_FIXTURE_NAME_RE.match(f.name).group(2)))
        self._attempts: dict[str, int] = {}
        self.id = f"fixture:{self._path.name}"

    def generate_text(self, prompt: str) -> str:
        m = _PROMPT_CWE_RE.search(prompt)
        if m is None:
            raise GenerationError("fixture backend cannot find a CWE id in the prompt")
        cwe = f"CWE-{int(m.group(1))}"
        files = self._files.get(cwe)
        if not files:
            raise GenerationError(f"no fixture responses for {cwe} in {self._path}")
        attempt = self._attempts.get(cwe, 0)
        self._attempts[cwe] = attempt + 1
        file = files[min(attempt, len(files) - 1)]
        try:
            return file.read_text(encoding="utf-8")
        except OSError as exc:
            raise GenerationError(f"cannot read fixture {file}: {exc}") from exc


# ---------------------------------------------------------------------------
# Orchestration


@dataclass(frozen=True)
class GenerationBatch:
    cwe: CweId
    candidates: tuple[PairedExample, ...]
    rejections: tuple[Rejection, ...]
    requested: int
    attempts: int

    @property
    def complete(self) -> bool:
        return len(self.candidates) >= self.requested


class ReviewSink(Protocol):
    def enqueue(self, pairs: Sequence[PairedExample]) -> int: ...


def generate_for_cwe(backend: GenerationBackend, cwe: CweEntry, pairs: int,
                     queue: ReviewSink, *, template: PromptTemplate = DEFAULT_TEMPLATE,
                     max_retries: int = 2, generated_at: str | None = None) -> GenerationBatch:
    """Request `pairs` candidate pairs for one CWE and queue them for review.

    Shortfalls trigger retries (up to max_retries) that ask only for the
    missing count. The batch, complete or not, is enqueued before returning;
    a run that never yields a single usable pair raises instead.
    """
    if pairs < 1:
        raise GenerationError(f"pairs must be >= 1, got {pairs}")
    if max_retries < 0:
        raise GenerationError(f"max_retries must be >= 0, got {max_retries}")

    kept: list[PairedExample] = []
    seen: set[tuple[str, str]] = set()
    all_rejections: list[Rejection] = []
    feedback: list[str] = []
    attempts = 0

    while attempts <= max_retries and len(kept) < pairs:
        shortfall = pairs - len(kept)
        prompt = render_prompt(template, cwe, shortfall, feedback=feedback)
        attempts += 1
        raw = backend.generate_text(prompt)
        try:
            parsed = parse_generation(
                raw, cwe.id, backend_id=backend.id,
                template_version=template.version, generated_at=generated_at)
        except GenerationParseError as exc:
            all_rejections.append(Rejection(index=-1, reason=str(exc)))
            feedback = ["the response was not a JSON array of pair records"]
            continue
        feedback = [r.reason for r in parsed.rejections]
        all_rejections.extend(parsed.rejections)
        for candidate in parsed.candidates:
            key = (candidate.vulnerable.code, candidate.fixed.code)
            if key in seen:
                all_rejections.append(Rejection(index=-1, reason="duplicate of an earlier candidate"))
                feedback.append("a pair duplicated an earlier candidate; produce new scenarios")
                continue
            if len(kept) < pairs:
                seen.add(key)
                kept.append(candidate)

    if not kept:
        raise GenerationError(
            f"no usable pairs for {cwe.id} after {attempts} attempt(s); "
            f"last problems: {[r.reason for r in all_rejections[-3:]]}")

    batch = GenerationBatch(
        cwe=cwe.id, candidates=tuple(kept), rejections=tuple(all_rejections),
        requested=pairs, attempts=attempts)
    queue.enqueue(batch.candidates)
    return batch
