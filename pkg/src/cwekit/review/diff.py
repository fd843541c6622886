"""Line-level diffs between a vulnerable snippet and its fix.

The server computes these once so every client renders the same hunks; replace
hunks additionally carry character-level segments for intra-line highlighting.
"""

from __future__ import annotations

import difflib


def _inline_segments(a: str, b: str) -> list[dict]:
    matcher = difflib.SequenceMatcher(a=a, b=b, autojunk=False)
    return [
        {"op": op, "a": a[i1:i2], "b": b[j1:j2]}
        for op, i1, i2, j1, j2 in matcher.get_opcodes()
    ]


def diff_hunks(a: str, b: str) -> list[dict]:
    """Opcode hunks over lines; starts are 1-based line numbers."""
    a_lines = a.splitlines()
    b_lines = b.splitlines()
    matcher = difflib.SequenceMatcher(a=a_lines, b=b_lines, autojunk=False)
    hunks = []
    for op, i1, i2, j1, j2 in matcher.get_opcodes():
        hunk = {
            "op": op,
            "a_start": i1 + 1,
            "b_start": j1 + 1,
            "a_lines": a_lines[i1:i2],
            "b_lines": b_lines[j1:j2],
        }
        if op == "replace":
            hunk["inline"] = [
                _inline_segments(x, y)
                for x, y in zip(a_lines[i1:i2], b_lines[j1:j2])
            ]
        hunks.append(hunk)
    return hunks
