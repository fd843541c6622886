"""Dataset backbone: verdict labels, reviewed pairs, instances, splits, JSONL I/O.

The label grammar is deliberately tiny. A dataset label is exactly "Secure" or
"Vulnerable - CWE-<n>"; anything else is rejected at construction time so that
invalid labels can never reach a training or evaluation file.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .catalog import CweId, parse_cwe_id
from .errors import CwekitError


class DatasetError(CwekitError):
    pass


class LabelError(DatasetError):
    pass


def iso_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Verdicts and the label grammar


@dataclass(frozen=True)
class Verdict:
    """Outcome of judging one snippet: secure, or vulnerable to a specific CWE."""

    cwe: CweId | None = None

    @classmethod
    def secure(cls) -> "Verdict":
        return cls(cwe=None)

    @classmethod
    def vulnerable(cls, cwe: CweId) -> "Verdict":
        if not isinstance(cwe, CweId):
            raise LabelError(f"vulnerable verdict needs a CweId, got {cwe!r}")
        return cls(cwe=cwe)

    @property
    def is_vulnerable(self) -> bool:
        return self.cwe is not None


def render_label(verdict: Verdict) -> str:
    if verdict.is_vulnerable:
        return f"Vulnerable - {verdict.cwe.canonical}"
    return "Secure"


_STRICT_VULNERABLE_RE = re.compile(r"^Vulnerable - CWE-([1-9][0-9]*)$")


def parse_label_strict(text: str) -> Verdict:
    """Parse a dataset label, accepting only the canonical forms.

    A single trailing newline is tolerated; everything else must match
    byte for byte.
    """
    if not isinstance(text, str):
        raise LabelError(f"label must be a string, got {type(text).__name__}")
    trimmed = text
    if trimmed.endswith("\n"):
        trimmed = trimmed[:-1]
    if trimmed.endswith("\r"):
        trimmed = trimmed[:-1]
    if trimmed == "Secure":
        return Verdict.secure()
    m = _STRICT_VULNERABLE_RE.match(trimmed)
    if m:
        return Verdict.vulnerable(CweId(int(m.group(1))))
    raise LabelError(f"not a canonical label: {text!r}")


# ---------------------------------------------------------------------------
# Snippets and reviewed pairs


@dataclass(frozen=True)
class Snippet:
    code: str

    def __post_init__(self) -> None:
        if not isinstance(self.code, str) or not self.code.strip():
            raise DatasetError("snippet code must be non-empty")

    @property
    def line_count(self) -> int:
        return len(self.code.splitlines())


@dataclass(frozen=True)
class Provenance:
    """Where a generated pair came from."""

    backend: str
    template_version: str
    generated_at: str  # ISO 8601

    def __post_init__(self) -> None:
        for name in ("backend", "template_version", "generated_at"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise DatasetError(f"provenance {name} must be a non-empty string")


PENDING = "pending"
ACCEPTED = "accepted"
REJECTED = "rejected"
EDITED_THEN_ACCEPTED = "edited_then_accepted"
REVIEW_STATES = (PENDING, ACCEPTED, REJECTED, EDITED_THEN_ACCEPTED)
ACCEPTED_FAMILY = (ACCEPTED, EDITED_THEN_ACCEPTED)


@dataclass(frozen=True)
class ReviewState:
    state: str = PENDING
    reason: str | None = None  # set iff state == rejected

    def __post_init__(self) -> None:
        if self.state not in REVIEW_STATES:
            raise DatasetError(f"unknown review state {self.state!r}")
        if self.state == REJECTED:
            if not self.reason or not self.reason.strip():
                raise DatasetError("rejected state requires a reason")
        elif self.reason is not None:
            raise DatasetError(f"state {self.state!r} does not carry a reason")

    @property
    def is_accepted_family(self) -> bool:
        return self.state in ACCEPTED_FAMILY


# Legal review transitions: pending is the only state that may change.
_TRANSITIONS = {PENDING: {ACCEPTED, REJECTED, EDITED_THEN_ACCEPTED}}


def check_transition(old: ReviewState, new: ReviewState) -> None:
    allowed = _TRANSITIONS.get(old.state, set())
    if new.state not in allowed:
        raise DatasetError(f"illegal review transition {old.state} -> {new.state}")


@dataclass(frozen=True)
class PairedExample:
    """One vulnerable snippet and its fixed counterpart for a single CWE."""

    cwe: CweId
    vulnerable: Snippet
    fixed: Snippet
    provenance: Provenance
    review_state: ReviewState = field(default_factory=ReviewState)

    def __post_init__(self) -> None:
        if self.vulnerable.code == self.fixed.code:
            raise DatasetError(f"{self.cwe}: vulnerable and fixed snippets are identical")

    def with_state(self, new_state: ReviewState) -> "PairedExample":
        check_transition(self.review_state, new_state)
        return replace(self, review_state=new_state)

    def content_digest(self) -> str:
        """Identity of the pair's reviewable content, independent of provenance."""
        h = hashlib.sha256()
        for part in (self.cwe.canonical, self.vulnerable.code, self.fixed.code):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Instances


@dataclass(frozen=True)
class LabeledInstance:
    """One instruction-following training or evaluation record."""

    instruction: str
    input: str
    output: str

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise DatasetError("instruction must be non-empty")
        if not self.input.strip():
            raise DatasetError("input snippet must be non-empty")
        parse_label_strict(self.output)  # raises LabelError on anything non-canonical

    @property
    def verdict(self) -> Verdict:
        return parse_label_strict(self.output)


def expand_pair(pair: PairedExample, instruction: str) -> tuple[LabeledInstance, LabeledInstance]:
    """Expand a reviewed pair into one Vulnerable and one Secure instance.

    Only accepted pairs may enter a dataset; pending or rejected pairs are a
    caller bug and raise.
    """
    if not pair.review_state.is_accepted_family:
        raise DatasetError(
            f"cannot expand pair in state {pair.review_state.state!r}; review it first")
    vulnerable = LabeledInstance(
        instruction=instruction,
        input=pair.vulnerable.code,
        output=render_label(Verdict.vulnerable(pair.cwe)),
    )
    secure = LabeledInstance(
        instruction=instruction,
        input=pair.fixed.code,
        output=render_label(Verdict.secure()),
    )
    return vulnerable, secure


# ---------------------------------------------------------------------------
# Splitting

StratumKey = tuple[str | None, str]  # (canonical CWE or None, "vulnerable" | "secure")


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[LabeledInstance, ...]
    test: tuple[LabeledInstance, ...]
    seed: int
    manifest: dict


def _default_stratum(instance: LabeledInstance) -> StratumKey:
    verdict = instance.verdict
    if verdict.is_vulnerable:
        return (verdict.cwe.canonical, "vulnerable")
    return (None, "secure")


def _stratum_label(key: StratumKey) -> str:
    cwe, kind = key
    return f"{cwe}/{kind}" if cwe else kind


def split_dataset(
    instances: Sequence[LabeledInstance],
    test_size: int,
    seed: int,
    strata: Sequence[StratumKey] | None = None,
) -> DatasetSplit:
    """Deterministic stratified split.

    Test quotas per stratum follow largest-remainder rounding of the exact
    proportional share; remainder ties are broken by the seeded RNG, which also
    picks the members within each stratum. Instances keep their input order on
    both sides.

    When the caller knows each instance's origin (which CWE a Secure snippet
    was the fix for), it should pass explicit strata so secure instances are
    balanced per CWE too; by default the stratum is derived from the label.
    """
    total = len(instances)
    if not 0 < test_size < total:
        raise DatasetError(f"test_size must be within 1..{total - 1}, got {test_size}")
    if strata is None:
        keys = [_default_stratum(inst) for inst in instances]
    else:
        if len(strata) != total:
            raise DatasetError("strata must parallel instances one to one")
        keys = list(strata)

    groups: dict[StratumKey, list[int]] = {}
    for index, key in enumerate(keys):
        groups.setdefault(key, []).append(index)

    rng = random.Random(seed)
    order = list(groups)
    tie = {key: rng.random() for key in order}

    base: dict[StratumKey, int] = {}
    remainders: list[tuple[Fraction, float, StratumKey]] = []
    for key in order:
        quota = Fraction(test_size * len(groups[key]), total)
        base[key] = math.floor(quota)
        remainders.append((quota - base[key], tie[key], key))
    leftover = test_size - sum(base.values())
    for frac, tiebreak, key in sorted(remainders, key=lambda r: (-r[0], r[1])):
        if leftover == 0:
            break
        base[key] += 1
        leftover -= 1

    test_indices: set[int] = set()
    for key in order:
        take = base[key]
        if take:
            test_indices.update(rng.sample(groups[key], take))

    train = tuple(inst for i, inst in enumerate(instances) if i not in test_indices)
    test = tuple(inst for i, inst in enumerate(instances) if i in test_indices)

    def side_counts(member: set[int] | None) -> dict[str, int]:
        counts: dict[str, int] = {}
        for i, key in enumerate(keys):
            in_test = i in test_indices
            if (member is None) == in_test:
                continue
            label = _stratum_label(key)
            counts[label] = counts.get(label, 0) + 1
        return dict(sorted(counts.items()))

    manifest = {
        "schema_version": 1,
        "seed": seed,
        "test_size": test_size,
        "total": total,
        "counts": {"train": side_counts(None), "test": side_counts(test_indices)},
        "train_digest": instances_digest(train),
        "test_digest": instances_digest(test),
    }
    return DatasetSplit(train=train, test=test, seed=seed, manifest=manifest)


# ---------------------------------------------------------------------------
# JSONL persistence

_INSTANCE_FIELDS = {"instruction", "input", "output"}
_PAIR_FIELDS = {"cwe", "vulnerable", "fixed", "provenance", "review_state"}
_PROVENANCE_FIELDS = {"backend", "template_version", "generated_at"}
_STATE_FIELDS = {"state", "reason"}


def instance_to_dict(instance: LabeledInstance) -> dict:
    return {
        "instruction": instance.instruction,
        "input": instance.input,
        "output": instance.output,
    }


def instance_from_dict(record: dict, where: str = "instance") -> LabeledInstance:
    _require_fields(record, _INSTANCE_FIELDS, where)
    for name in ("instruction", "input", "output"):
        if not isinstance(record[name], str):
            raise DatasetError(f"{where}: {name} must be a string")
    try:
        return LabeledInstance(**record)
    except DatasetError as exc:
        raise DatasetError(f"{where}: {exc}") from exc


def pair_to_dict(pair: PairedExample) -> dict:
    state: dict = {"state": pair.review_state.state}
    if pair.review_state.reason is not None:
        state["reason"] = pair.review_state.reason
    return {
        "cwe": pair.cwe.canonical,
        "vulnerable": pair.vulnerable.code,
        "fixed": pair.fixed.code,
        "provenance": {
            "backend": pair.provenance.backend,
            "template_version": pair.provenance.template_version,
            "generated_at": pair.provenance.generated_at,
        },
        "review_state": state,
    }


def pair_from_dict(record: dict, where: str = "pair") -> PairedExample:
    _require_fields(record, _PAIR_FIELDS, where)
    if not isinstance(record["provenance"], dict):
        raise DatasetError(f"{where}: provenance must be an object")
    if not isinstance(record["review_state"], dict):
        raise DatasetError(f"{where}: review_state must be an object")
    _require_fields(record["provenance"], _PROVENANCE_FIELDS, f"{where} provenance")
    state_rec = dict(record["review_state"])
    unknown = set(state_rec) - _STATE_FIELDS
    if unknown:
        raise DatasetError(f"{where} review_state: unknown fields {sorted(unknown)}")
    if "state" not in state_rec:
        raise DatasetError(f"{where} review_state: missing field 'state'")
    for name in ("vulnerable", "fixed"):
        if not isinstance(record[name], str):
            raise DatasetError(f"{where}: {name} must be a string")
    try:
        return PairedExample(
            cwe=parse_cwe_id(record["cwe"]),
            vulnerable=Snippet(record["vulnerable"]),
            fixed=Snippet(record["fixed"]),
            provenance=Provenance(**record["provenance"]),
            review_state=ReviewState(state=state_rec["state"], reason=state_rec.get("reason")),
        )
    except CwekitError as exc:
        raise DatasetError(f"{where}: {exc}") from exc


def _require_fields(record: dict, fields: set[str], where: str) -> None:
    if not isinstance(record, dict):
        raise DatasetError(f"{where}: record must be an object")
    missing = fields - set(record)
    unknown = set(record) - fields
    if missing:
        raise DatasetError(f"{where}: missing fields {sorted(missing)}")
    if unknown:
        raise DatasetError(f"{where}: unknown fields {sorted(unknown)}")


def _dump_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False) + "\n"


def instances_to_jsonl(instances: Iterable[LabeledInstance]) -> str:
    return "".join(_dump_line(instance_to_dict(inst)) for inst in instances)


def instances_digest(instances: Iterable[LabeledInstance]) -> str:
    return hashlib.sha256(instances_to_jsonl(instances).encode("utf-8")).hexdigest()


def write_instances_jsonl(instances: Sequence[LabeledInstance], path: str | Path) -> int:
    Path(path).write_text(instances_to_jsonl(instances), encoding="utf-8")
    return len(instances)


def read_instances_jsonl(path: str | Path) -> list[LabeledInstance]:
    return _read_jsonl(path, instance_from_dict)


def write_pairs_jsonl(pairs: Sequence[PairedExample], path: str | Path) -> int:
    Path(path).write_text(
        "".join(_dump_line(pair_to_dict(p)) for p in pairs), encoding="utf-8")
    return len(pairs)


def read_pairs_jsonl(path: str | Path) -> list[PairedExample]:
    return _read_jsonl(path, pair_from_dict)


def _read_jsonl(path, from_dict):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path} line {lineno}"
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{where}: invalid JSON: {exc}") from exc
        records.append(from_dict(raw, where))
    return records
