#!/usr/bin/env python3
"""Recompute the aggregate SELD score from published (ER, F20 %, LE deg, LR %) rows.

Rows are given on the command line as ER,F20,LE,LR,reported, or default to
two reference rows. The gap between the recomputed score and the reported
3-decimal value shows how much rounding of the components contributes.
"""

from __future__ import annotations

import argparse

from swgformer.metrics import seld_score

DEFAULT_ROWS = [
    ("SwG-former", 0.64, 45.2, 24.5, 65.7, 0.416),
    ("Conv-Conformer", 0.65, 48.4, 21.5, 70.4, 0.396),
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("rows", nargs="*", help="ER,F20%%,LE,LR%%,reported")
    args = ap.parse_args()
    rows = DEFAULT_ROWS
    if args.rows:
        rows = [(f"row{i}", *map(float, r.split(","))) for i, r in enumerate(args.rows)]
    print(f"{'model':<16} {'recomputed':>10} {'reported':>9} {'diff':>8}")
    for name, er, f20, le, lr, reported in rows:
        score = seld_score(er, f20 / 100.0, le, lr / 100.0)
        print(f"{name:<16} {score:10.5f} {reported:9.3f} {score - reported:+8.5f}")


if __name__ == "__main__":
    main()
