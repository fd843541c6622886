#!/usr/bin/env python3
"""Enumerate confusion matrices consistent with the published headline metrics.

Searches every non-negative integer (tp, fp, fn, tn) with total 100 and
records which ones reproduce the published values
    accuracy 99%, precision 98.08%, recall 100%, F1 99.04%
under two criteria:

  strict   each metric, computed exactly, rounds (half-up) to the printed
           figure at its printed precision (whole percent for accuracy and
           recall, two decimals for precision and F1)
  near     each metric is within 0.0005 of the printed figure read as a
           fraction (0.99, 0.9808, 1.0, 0.9904), the tolerance the
           acceptance suite uses

The result is committed to tests/fixtures/table2_matrices.json so tests can
assert against a frozen, independently derived answer. Run from the repo
root: python scripts/table2_matrix_search.py
"""

from __future__ import annotations

import json
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path

TOTAL = 100
TOLERANCE = Fraction(5, 10000)  # 0.0005

# printed figure -> (target fraction, printed decimal places of the percent)
PRINTED = {
    "accuracy": (Fraction(99, 100), 0),
    "precision": (Fraction(9808, 10000), 2),
    "recall": (Fraction(1), 0),
    "f1": (Fraction(9904, 10000), 2),
}


def metrics(tp: int, fp: int, fn: int, tn: int) -> dict[str, Fraction | None]:
    out: dict[str, Fraction | None] = {
        "accuracy": Fraction(tp + tn, TOTAL),
        "precision": Fraction(tp, tp + fp) if tp + fp else None,
        "recall": Fraction(tp, tp + fn) if tp + fn else None,
    }
    p, r = out["precision"], out["recall"]
    out["f1"] = 2 * p * r / (p + r) if p is not None and r is not None and p + r else None
    return out


def rounds_to_printed(value: Fraction, target: Fraction, places: int) -> bool:
    quantum = Decimal(1).scaleb(-places)
    pct = Decimal(value.numerator * 100) / Decimal(value.denominator)
    printed_pct = Decimal(target.numerator * 100) / Decimal(target.denominator)
    return pct.quantize(quantum, rounding=ROUND_HALF_UP) == printed_pct.quantize(quantum)


def main() -> None:
    strict: list[tuple[int, int, int, int]] = []
    near: list[dict] = []
    for tp in range(TOTAL + 1):
        for fp in range(TOTAL + 1 - tp):
            for fn in range(TOTAL + 1 - tp - fp):
                tn = TOTAL - tp - fp - fn
                m = metrics(tp, fp, fn, tn)
                if any(v is None for v in m.values()):
                    continue
                if all(rounds_to_printed(m[k], PRINTED[k][0], PRINTED[k][1]) for k in PRINTED):
                    strict.append((tp, fp, fn, tn))
                deviations = {k: abs(m[k] - PRINTED[k][0]) for k in PRINTED}
                if all(d <= TOLERANCE for d in deviations.values()):
                    near.append({
                        "matrix": [tp, fp, fn, tn],
                        "metrics": {k: float(m[k]) for k in PRINTED},
                        "max_deviation": float(max(deviations.values())),
                    })

    candidate = [51, 1, 0, 48]
    near_matrices = [entry["matrix"] for entry in near]
    minimax = min(near, key=lambda e: e["max_deviation"]) if near else None

    result = {
        "total_instances": TOTAL,
        "printed_percentages": {"accuracy": "99", "precision": "98.08",
                                "recall": "100", "f1": "99.04"},
        "targets": {k: float(PRINTED[k][0]) for k in PRINTED},
        "tolerance": float(TOLERANCE),
        "strict_rounding_matches": [list(m) for m in strict],
        "near_matches": near,
        "candidate": candidate,
        "candidate_is_near_match": candidate in near_matrices,
        "candidate_is_unique_near_match": near_matrices == [candidate],
        "minimax_deviation_match": minimax["matrix"] if minimax else None,
        "note": (
            "No matrix survives strict rounding of all four figures at once: with "
            "recall pinned to 100% and accuracy to 99%, fn=0 and fp=1 are forced, "
            "and the only precision match (tp=51) has F1 = 102/103 = 99.03% after "
            "rounding, one hundredth below the printed 99.04%. Within the 0.0005 "
            "acceptance tolerance three compositions qualify; (51, 1, 0, 48) is "
            "the one with the smallest worst-case deviation and is used as the "
            "reference composition."
        ),
    }

    out_path = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "table2_matrices.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"strict matches: {result['strict_rounding_matches']}")
    print(f"near matches:   {near_matrices}")
    print(f"minimax:        {result['minimax_deviation_match']}")
    print(f"wrote {out_path}")


if __name__ == "__main__":
    main()
