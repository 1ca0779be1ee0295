#!/usr/bin/env python3
"""Module-order, aggregator and neighbour-count sweep on the desk-scale synthetic set.

Each configuration trains for a fixed number of epochs from the same seed and
is scored on the same validation clips. Orderings are reported, not asserted:
at this scale they are dominated by run-to-run noise.
"""

from __future__ import annotations

import argparse
import logging

from swgformer.experiments import ablation_configs, build_desk_dataset, format_ablation, run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--clips", type=int, default=200)
    ap.add_argument("--tables", default="order,aggregator,k", help="comma-separated subset")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="also write the table to this file")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    tables = set(args.tables.split(","))
    data = build_desk_dataset(n_clips=args.clips, seed=args.seed)
    configs = [c for c in ablation_configs() if c[0] in tables]
    table = format_ablation(run_ablation(data, epochs=args.epochs, configs=configs))
    print(table, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)


if __name__ == "__main__":
    main()
