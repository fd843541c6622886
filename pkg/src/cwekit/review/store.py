"""File-backed review queue with an append-only audit log.

Layout inside the store directory:
  items.jsonl   enqueue records and post-decision state records, appended in
                event order, never rewritten in normal operation
  audit.jsonl   one record per submitted decision

A decision appends its state record first and its audit record second. The
audit log is the source of truth: on startup the two files are replayed
together, a torn trailing line is discarded, and a trailing state record with
no matching audit record (a crash between the two appends) is rolled back.
Corruption anywhere else refuses to load, naming the file and line.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from ..catalog import CweEntry, parse_cwe_id
from ..dataset import (
    ACCEPTED,
    EDITED_THEN_ACCEPTED,
    PENDING,
    REJECTED,
    LabeledInstance,
    PairedExample,
    ReviewState,
    Snippet,
    expand_pair,
    iso_now,
    pair_from_dict,
    pair_to_dict,
)
from ..errors import CwekitError
from ..generation import syntax_check

log = logging.getLogger(__name__)


class StoreError(CwekitError):
    pass


class StoreCorruptionError(StoreError):
    pass


class NotFoundError(StoreError):
    pass


class ConflictError(StoreError):
    pass


class GateError(StoreError):
    """A decision that does not satisfy the review gate."""


# ---------------------------------------------------------------------------
# Review checks and decisions

CHECK_NAMES = ("classification_correct", "fix_valid", "realistic")


@dataclass(frozen=True)
class Check:
    value: bool
    note: str = ""


@dataclass(frozen=True)
class CheckSet:
    classification_correct: Check
    fix_valid: Check
    realistic: Check

    @classmethod
    def from_dict(cls, data: dict) -> "CheckSet":
        if not isinstance(data, dict):
            raise GateError("checks must be an object")
        unknown = set(data) - set(CHECK_NAMES)
        if unknown:
            raise GateError(f"unknown check(s) {sorted(unknown)}")
        missing = set(CHECK_NAMES) - set(data)
        if missing:
            raise GateError(f"missing check(s) {sorted(missing)}")
        kwargs = {}
        for name in CHECK_NAMES:
            entry = data[name]
            if isinstance(entry, bool):
                entry = {"value": entry}
            if not isinstance(entry, dict) or not isinstance(entry.get("value"), bool):
                raise GateError(f"check {name} needs a boolean value")
            note = entry.get("note", "")
            if not isinstance(note, str):
                raise GateError(f"check {name} note must be a string")
            kwargs[name] = Check(value=entry["value"], note=note)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            name: {"value": getattr(self, name).value, "note": getattr(self, name).note}
            for name in CHECK_NAMES
        }


ACCEPT = "accept"
REJECT = "reject"
EDIT_ACCEPT = "edit_accept"
DECISION_KINDS = (ACCEPT, REJECT, EDIT_ACCEPT)


@dataclass(frozen=True)
class Decision:
    kind: str
    reviewer: str = "reviewer"
    checks: CheckSet | None = None
    reason: str | None = None
    replacement_vulnerable: str | None = None
    replacement_fixed: str | None = None

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "reviewer": self.reviewer}
        if self.checks is not None:
            out["checks"] = self.checks.to_dict()
        if self.reason is not None:
            out["reason"] = self.reason
        if self.kind == EDIT_ACCEPT:
            out["replacement"] = {
                "vulnerable": self.replacement_vulnerable,
                "fixed": self.replacement_fixed,
            }
        return out


@dataclass(frozen=True)
class ReviewItem:
    item_id: str
    position: int  # enqueue order, 0-based
    pair: PairedExample
    enqueued_at: str
    checks: CheckSet | None = None
    reviewer: str | None = None
    decided_at: str | None = None

    @property
    def state(self) -> str:
        return self.pair.review_state.state


@dataclass(frozen=True)
class PageResult:
    items: tuple[ReviewItem, ...]
    page: int
    page_size: int
    total_pending: int
    pages: int


# ---------------------------------------------------------------------------
# The queue


class ReviewQueue:
    def __init__(self, directory: str | Path):
        self._dir = Path(directory)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._items_path = self._dir / "items.jsonl"
        self._audit_path = self._dir / "audit.jsonl"
        self._lock = threading.RLock()
        self._items: dict[str, ReviewItem] = {}
        self._order: list[str] = []
        self._audit: list[dict] = []
        self.repairs: list[str] = []
        self._load()

    # -- loading and crash recovery

    def _read_records(self, path: Path) -> list[dict]:
        """Parse a JSONL file; a torn final line is dropped and logged,
        malformed content anywhere else refuses the store."""
        if not path.exists():
            return []
        try:
            raw_lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise StoreError(f"cannot read {path}: {exc}") from exc
        records = []
        for lineno, line in enumerate(raw_lines, start=1):
            if not line.strip():
                continue
            try:
                records.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                if lineno == len(raw_lines):
                    self.repairs.append(f"{path.name}: dropped torn final line {lineno}")
                    log.warning("review store repair: %s", self.repairs[-1])
                    self._rewrite(path, [rec for _, rec in records])
                    break
                raise StoreCorruptionError(f"{path} line {lineno}: invalid JSON: {exc}") from exc
        return [rec for _, rec in records]

    def _rewrite(self, path: Path, records: Iterable[dict]) -> None:
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        os.replace(tmp, path)

    def _load(self) -> None:
        item_records = self._read_records(self._items_path)
        audit_records = self._read_records(self._audit_path)

        enqueues: list[dict] = []
        states: list[dict] = []
        for i, rec in enumerate(item_records, start=1):
            kind = rec.get("kind")
            if kind == "enqueue":
                enqueues.append(rec)
            elif kind == "state":
                states.append(rec)
            else:
                raise StoreCorruptionError(
                    f"{self._items_path} record {i}: unknown kind {kind!r}")

        # A trailing state record with no audit record is the crash window;
        # anything else out of step is corruption.
        if len(states) == len(audit_records) + 1:
            orphan = states.pop()
            self.repairs.append(
                f"items.jsonl: rolled back unaudited decision on {orphan.get('item_id')}")
            log.warning("review store repair: %s", self.repairs[-1])
            kept = [r for r in item_records if r is not orphan]
            self._rewrite(self._items_path, kept)
        elif len(states) > len(audit_records) + 1 or len(audit_records) > len(states):
            raise StoreCorruptionError(
                f"{self._dir}: {len(states)} state record(s) vs {len(audit_records)} "
                f"audit record(s); store needs manual attention")

        for i, rec in enumerate(enqueues, start=1):
            where = f"{self._items_path} enqueue record {i}"
            try:
                pair = pair_from_dict(rec["pair"], where)
                item = ReviewItem(
                    item_id=rec["item_id"], position=len(self._order),
                    pair=pair, enqueued_at=rec["enqueued_at"])
            except (KeyError, CwekitError) as exc:
                raise StoreCorruptionError(f"{where}: {exc}") from exc
            if item.item_id in self._items:
                raise StoreCorruptionError(f"{where}: duplicate item id {item.item_id}")
            self._items[item.item_id] = item
            self._order.append(item.item_id)

        # Audit is the source of truth for decisions; state records must agree.
        for i, (state_rec, audit_rec) in enumerate(zip(states, audit_records), start=1):
            if state_rec.get("item_id") != audit_rec.get("item_id"):
                raise StoreCorruptionError(
                    f"{self._dir}: decision {i} disagrees between items.jsonl "
                    f"({state_rec.get('item_id')}) and audit.jsonl ({audit_rec.get('item_id')})")
            try:
                decision = self._decision_from_dict(audit_rec["decision"])
                item = self._items[audit_rec["item_id"]]
                updated = self._apply(item, decision, audit_rec["decision"].get("decided_at")
                                      or audit_rec.get("decided_at") or "unknown")
            except KeyError as exc:
                raise StoreCorruptionError(
                    f"{self._audit_path} record {i}: missing field {exc}") from exc
            except CwekitError as exc:
                raise StoreCorruptionError(
                    f"{self._audit_path} record {i}: replay failed: {exc}") from exc
            if updated.state != state_rec.get("review_state", {}).get("state"):
                raise StoreCorruptionError(
                    f"{self._dir}: decision {i} state record says "
                    f"{state_rec.get('review_state')}, audit replay says {updated.state}")
            self._items[item.item_id] = updated
            self._audit.append(audit_rec)

    def _decision_from_dict(self, data: dict) -> Decision:
        kind = data.get("kind")
        if kind not in DECISION_KINDS:
            raise StoreError(f"unknown decision kind {kind!r}")
        checks = CheckSet.from_dict(data["checks"]) if "checks" in data else None
        replacement = data.get("replacement") or {}
        return Decision(
            kind=kind,
            reviewer=data.get("reviewer", "reviewer"),
            checks=checks,
            reason=data.get("reason"),
            replacement_vulnerable=replacement.get("vulnerable"),
            replacement_fixed=replacement.get("fixed"),
        )

    # -- writing

    def _append(self, path: Path, record: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # -- operations

    def enqueue(self, pairs: Sequence[PairedExample]) -> int:
        """Add pending pairs, skipping content already in the store. Returns
        the number actually added."""
        added = 0
        with self._lock:
            for pair in pairs:
                if pair.review_state.state != PENDING:
                    raise StoreError(
                        f"only pending pairs can be enqueued, got {pair.review_state.state!r}")
                item_id = pair.content_digest()
                if item_id in self._items:
                    continue
                item = ReviewItem(
                    item_id=item_id, position=len(self._order),
                    pair=pair, enqueued_at=iso_now())
                self._append(self._items_path, {
                    "kind": "enqueue", "item_id": item_id,
                    "enqueued_at": item.enqueued_at, "pair": pair_to_dict(pair)})
                self._items[item_id] = item
                self._order.append(item_id)
                added += 1
        return added

    def get(self, item_id: str) -> ReviewItem:
        with self._lock:
            try:
                return self._items[item_id]
            except KeyError:
                raise NotFoundError(f"no review item {item_id!r}") from None

    def list_pending(self, cwe: str | None = None, page: int = 1,
                     page_size: int = 20) -> PageResult:
        """Pending items in enqueue order, optionally filtered by CWE."""
        if page < 1:
            raise StoreError(f"page must be >= 1, got {page}")
        if page_size < 1:
            raise StoreError(f"page_size must be >= 1, got {page_size}")
        wanted = parse_cwe_id(cwe).canonical if cwe else None
        with self._lock:
            pending = [
                self._items[item_id] for item_id in self._order
                if self._items[item_id].state == PENDING
                and (wanted is None or self._items[item_id].pair.cwe.canonical == wanted)
            ]
        pages = math.ceil(len(pending) / page_size)
        start = (page - 1) * page_size
        return PageResult(
            items=tuple(pending[start:start + page_size]),
            page=page, page_size=page_size,
            total_pending=len(pending), pages=pages)

    def _apply(self, item: ReviewItem, decision: Decision, decided_at: str) -> ReviewItem:
        """Validate a decision against an item and produce the updated item.
        Pure with respect to store state; raises instead of writing."""
        if item.state != PENDING:
            raise ConflictError(f"item {item.item_id} is already {item.state}")
        if decision.kind not in DECISION_KINDS:
            raise GateError(f"unknown decision kind {decision.kind!r}")

        if decision.kind == REJECT:
            if not decision.reason or not decision.reason.strip():
                raise GateError("reject requires a non-empty reason")
            new_pair = item.pair.with_state(ReviewState(REJECTED, decision.reason))
            return replace(item, pair=new_pair, checks=decision.checks,
                           reviewer=decision.reviewer, decided_at=decided_at)

        # accept family
        if decision.checks is None:
            raise GateError(
                "accept requires all three checks "
                f"({', '.join(CHECK_NAMES)}) to be recorded")

        if decision.kind == ACCEPT:
            new_pair = item.pair.with_state(ReviewState(ACCEPTED))
        else:
            vuln = decision.replacement_vulnerable
            fixed = decision.replacement_fixed
            for side, code in (("vulnerable", vuln), ("fixed", fixed)):
                if not isinstance(code, str) or not code.strip():
                    raise GateError(f"edit requires a non-empty {side} replacement")
                issue = syntax_check(code)
                if issue is not None:
                    raise GateError(
                        f"edited {side} snippet has a syntax error at line "
                        f"{issue.line}: {issue.message}")
            if vuln == fixed:
                raise GateError("edited vulnerable and fixed snippets must differ")
            edited = replace(item.pair, vulnerable=Snippet(vuln), fixed=Snippet(fixed))
            new_pair = edited.with_state(ReviewState(EDITED_THEN_ACCEPTED))
        return replace(item, pair=new_pair, checks=decision.checks,
                       reviewer=decision.reviewer, decided_at=decided_at)

    def submit_decision(self, item_id: str, decision: Decision) -> ReviewItem:
        """Atomically decide one pending item. All validation happens before
        any byte is written; the audit record follows the state record."""
        with self._lock:
            item = self.get(item_id)
            decided_at = iso_now()
            updated = self._apply(item, decision, decided_at)

            if decision.kind == EDIT_ACCEPT:
                new_digest = updated.pair.content_digest()
                clash = self._items.get(new_digest)
                if clash is not None and clash.item_id != item_id:
                    raise GateError(
                        f"edited content duplicates item {clash.item_id}")

            decision_snapshot = decision.to_dict()
            decision_snapshot["decided_at"] = decided_at
            state_record = {
                "kind": "state",
                "item_id": item_id,
                "review_state": {"state": updated.state,
                                 **({"reason": updated.pair.review_state.reason}
                                    if updated.pair.review_state.reason else {})},
                "decided_at": decided_at,
                "reviewer": decision.reviewer,
                "pair": pair_to_dict(updated.pair) if decision.kind == EDIT_ACCEPT else None,
            }
            audit_record = {
                "seq": len(self._audit) + 1,
                "item_id": item_id,
                "prior_state": item.state,
                "new_state": updated.state,
                "decision": decision_snapshot,
            }
            self._append(self._items_path, state_record)
            self._append(self._audit_path, audit_record)
            self._items[item_id] = updated
            self._audit.append(audit_record)
            return updated

    def accepted_items(self, catalog: Sequence[CweEntry]) -> list[ReviewItem]:
        """Accepted-family items ordered by catalog rank, then item id."""
        rank = {entry.id.number: entry.rank for entry in catalog}
        with self._lock:
            chosen = [item for item in self._items.values()
                      if item.pair.review_state.is_accepted_family]
        chosen.sort(key=lambda it: (
            rank.get(it.pair.cwe.number, 1000 + it.pair.cwe.number), it.item_id))
        return chosen

    def export_accepted(self, instruction: str,
                        catalog: Sequence[CweEntry]) -> list[LabeledInstance]:
        """Expand every accepted-family pair into its two instances."""
        instances: list[LabeledInstance] = []
        for item in self.accepted_items(catalog):
            instances.extend(expand_pair(item.pair, instruction))
        return instances

    def progress(self) -> dict:
        with self._lock:
            per_cwe: dict[str, dict[str, int]] = {}
            totals = {PENDING: 0, ACCEPTED: 0, REJECTED: 0, EDITED_THEN_ACCEPTED: 0}
            for item_id in self._order:
                item = self._items[item_id]
                bucket = per_cwe.setdefault(item.pair.cwe.canonical, {
                    PENDING: 0, ACCEPTED: 0, REJECTED: 0, EDITED_THEN_ACCEPTED: 0})
                bucket[item.state] += 1
                totals[item.state] += 1
            return {
                "per_cwe": dict(sorted(per_cwe.items(),
                                       key=lambda kv: parse_cwe_id(kv[0]).number)),
                "totals": totals,
                "items": len(self._order),
                "audit_records": len(self._audit),
            }

    def audit_trail(self) -> list[dict]:
        with self._lock:
            return [dict(rec) for rec in self._audit]

    def __len__(self) -> int:
        with self._lock:
            return len(self._order)
