"""CWE taxonomy: identifiers, the embedded Top 25 list, and catalog loading.

The embedded catalog pins the 2023 MITRE Top 25 Most Dangerous Software
Weaknesses. A different year (or a trimmed-down taxonomy) can be supplied as a
JSONL file whose records carry id, rank, name, and summary.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import CwekitError


class CatalogError(CwekitError):
    pass


@dataclass(frozen=True, order=True)
class CweId:
    """A CWE identifier; canonical form is "CWE-<n>" with no leading zeros."""

    number: int

    def __post_init__(self) -> None:
        if not isinstance(self.number, int) or isinstance(self.number, bool):
            raise CatalogError(f"CWE number must be an integer, got {self.number!r}")
        if self.number < 1:
            raise CatalogError(f"CWE number must be >= 1, got {self.number}")

    @property
    def canonical(self) -> str:
        return f"CWE-{self.number}"

    def __str__(self) -> str:
        return self.canonical


_CWE_ID_RE = re.compile(r"^\s*cwe\s*-?\s*0*(\d+)\s*$", re.IGNORECASE)


def parse_cwe_id(text: str) -> CweId:
    """Parse a CWE identifier, tolerating case and surrounding whitespace.

    "  cwe-89 " and "CWE-89" both map to CweId(89).
    """
    if not isinstance(text, str):
        raise CatalogError(f"CWE id must be a string, got {type(text).__name__}")
    m = _CWE_ID_RE.match(text)
    if m is None:
        raise CatalogError(f"not a CWE identifier: {text!r}")
    return CweId(int(m.group(1)))


@dataclass(frozen=True)
class CweEntry:
    id: CweId
    name: str
    rank: int  # position in the Top 25, 1..25
    summary: str

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise CatalogError(f"{self.id}: name must be non-empty")
        if not self.summary.strip():
            raise CatalogError(f"{self.id}: summary must be non-empty")
        if not 1 <= self.rank <= 25:
            raise CatalogError(f"{self.id}: rank {self.rank} outside 1..25")


# 2023 MITRE Top 25, in rank order: (rank, number, name, summary).
_TOP25_2023 = (
    (1, 787, "Out-of-bounds Write",
     "The software writes data past the end, or before the beginning, of the intended buffer."),
    (2, 79, "Improper Neutralization of Input During Web Page Generation ('Cross-site Scripting')",
     "User-controllable input is placed in web output without neutralization, letting attackers inject script into pages served to other users."),
    (3, 89, "Improper Neutralization of Special Elements used in an SQL Command ('SQL Injection')",
     "User-controllable input is used to build SQL statements without neutralizing special elements, altering the intended query."),
    (4, 416, "Use After Free",
     "Memory is referenced after it has been freed, leading to crashes or use of unexpected values."),
    (5, 78, "Improper Neutralization of Special Elements used in an OS Command ('OS Command Injection')",
     "User-controllable input is used to build an operating system command without neutralizing special elements."),
    (6, 20, "Improper Input Validation",
     "The product does not validate, or incorrectly validates, input that affects control flow or data flow."),
    (7, 125, "Out-of-bounds Read",
     "The software reads data past the end, or before the beginning, of the intended buffer."),
    (8, 22, "Improper Limitation of a Pathname to a Restricted Directory ('Path Traversal')",
     "External input is used to build a pathname without neutralizing sequences such as '..' that escape the restricted directory."),
    (9, 352, "Cross-Site Request Forgery (CSRF)",
     "The application does not verify that a state-changing request was intentionally sent by the user it came from."),
    (10, 434, "Unrestricted Upload of File with Dangerous Type",
     "The product allows uploading files of dangerous types that can be processed or executed in its environment."),
    (11, 862, "Missing Authorization",
     "The product performs an operation without checking whether the actor is allowed to perform it."),
    (12, 476, "NULL Pointer Dereference",
     "The product dereferences a pointer it expects to be valid but which is null."),
    (13, 287, "Improper Authentication",
     "The product does not correctly prove that a claimed identity is genuine."),
    (14, 190, "Integer Overflow or Wraparound",
     "Arithmetic produces a value too large for the type, wrapping to an unexpected number used in a sensitive context."),
    (15, 502, "Deserialization of Untrusted Data",
     "The product deserializes data from an untrusted source without sufficiently verifying it."),
    (16, 77, "Improper Neutralization of Special Elements used in a Command ('Command Injection')",
     "User-controllable input is used to build a command for a subsystem without neutralizing special elements."),
    (17, 119, "Improper Restriction of Operations within the Bounds of a Memory Buffer",
     "Operations read or write memory outside the boundaries of the backing buffer."),
    (18, 798, "Use of Hard-coded Credentials",
     "The product contains hard-coded credentials such as passwords or keys for authentication or data protection."),
    (19, 918, "Server-Side Request Forgery (SSRF)",
     "The server fetches a URL influenced by an attacker without validating the destination, reaching unintended hosts."),
    (20, 306, "Missing Authentication for Critical Function",
     "The product does not require authentication for a function that demands a proven identity."),
    (21, 362, "Concurrent Execution using Shared Resource with Improper Synchronization ('Race Condition')",
     "Concurrent code paths touch a shared resource without synchronization, so interleavings change the outcome."),
    (22, 269, "Improper Privilege Management",
     "Privileges are assigned, dropped, or checked incorrectly, creating an unintended sphere of control."),
    (23, 94, "Improper Control of Generation of Code ('Code Injection')",
     "User-controllable input is incorporated into code that the product later evaluates or executes."),
    (24, 863, "Incorrect Authorization",
     "An authorization check is performed but is incorrect, letting actors bypass intended restrictions."),
    (25, 276, "Incorrect Default Permissions",
     "Installed or created resources have default permissions that expose them to unintended actors."),
)

_CATALOG_FIELDS = {"id", "rank", "name", "summary"}


def _embedded_catalog() -> list[CweEntry]:
    return [
        CweEntry(id=CweId(number), name=name, rank=rank, summary=summary)
        for rank, number, name, summary in _TOP25_2023
    ]


def _entry_from_record(record: dict, where: str) -> CweEntry:
    keys = set(record)
    missing = _CATALOG_FIELDS - keys
    unknown = keys - _CATALOG_FIELDS
    if missing:
        raise CatalogError(f"{where}: missing fields {sorted(missing)}")
    if unknown:
        raise CatalogError(f"{where}: unknown fields {sorted(unknown)}")
    if not isinstance(record["rank"], int) or isinstance(record["rank"], bool):
        raise CatalogError(f"{where}: rank must be an integer")
    for field in ("id", "name", "summary"):
        if not isinstance(record[field], str):
            raise CatalogError(f"{where}: {field} must be a string")
    try:
        cwe = parse_cwe_id(record["id"])
        return CweEntry(id=cwe, name=record["name"], rank=record["rank"],
                        summary=record["summary"])
    except CatalogError as exc:
        raise CatalogError(f"{where}: {exc}") from exc


def load_catalog(path: str | Path | None = None) -> list[CweEntry]:
    """Load the CWE catalog, sorted by rank.

    With no path, returns the embedded 2023 Top 25. With a path, reads one
    JSON record per line and validates that the result is exactly 25 entries
    whose ranks cover 1..25 with unique ids.
    """
    if path is None:
        return _embedded_catalog()

    path = Path(path)
    entries: list[CweEntry] = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CatalogError(f"cannot read catalog {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path} line {lineno}"
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CatalogError(f"{where}: invalid JSON: {exc}") from exc
        if not isinstance(record, dict):
            raise CatalogError(f"{where}: record must be an object")
        entries.append(_entry_from_record(record, where))

    if len(entries) != 25:
        raise CatalogError(f"{path}: catalog must have exactly 25 entries, got {len(entries)}")
    by_rank: dict[int, CweEntry] = {}
    by_id: dict[int, CweEntry] = {}
    for entry in entries:
        if entry.rank in by_rank:
            raise CatalogError(
                f"{path}: duplicate rank {entry.rank} ({by_rank[entry.rank].id} and {entry.id})")
        if entry.id.number in by_id:
            raise CatalogError(f"{path}: duplicate id {entry.id}")
        by_rank[entry.rank] = entry
        by_id[entry.id.number] = entry
    # 25 unique ranks, each within 1..25 (checked per entry), covers exactly 1..25
    return [by_rank[rank] for rank in sorted(by_rank)]


def catalog_to_jsonl(entries: list[CweEntry]) -> str:
    """Serialize a catalog in the same record format load_catalog reads."""
    lines = []
    for e in entries:
        lines.append(json.dumps(
            {"id": e.id.canonical, "rank": e.rank, "name": e.name, "summary": e.summary},
            ensure_ascii=False))
    return "\n".join(lines) + "\n"
