#!/usr/bin/env python3
"""Train the desk-scale model on synthetic single-source clips and compare with the untrained model."""

from __future__ import annotations

import argparse
import dataclasses
import logging

from swgformer.experiments import DESK_TRAIN, build_desk_dataset, run_desk_learning
from swgformer.model import desk_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--clips", type=int, default=200)
    ap.add_argument("--val", type=int, default=40)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--steps", type=int, default=DESK_TRAIN.max_steps)
    ap.add_argument("--lr", type=float, default=DESK_TRAIN.lr)
    ap.add_argument("--batch-size", type=int, default=DESK_TRAIN.batch_size)
    ap.add_argument("--time-budget", type=float, default=None, help="seconds")
    ap.add_argument("--log", default="", help="per-epoch CSV log path")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    data = build_desk_dataset(n_clips=args.clips, n_classes=args.classes, n_val=args.val, seed=args.seed)
    print(f"built {args.clips} clips in {data.seconds:.1f} s")
    tcfg = dataclasses.replace(DESK_TRAIN, lr=args.lr, batch_size=args.batch_size, max_steps=args.steps,
                               seed=args.seed, log_path=args.log)
    out = run_desk_learning(data, desk_config(n_classes=args.classes, seed=args.seed), tcfg, args.time_budget)
    print(f"\nuntrained (direction error with reference activity: {out.untrained_direction_le:.1f} deg)")
    print(out.untrained.to_text())
    print(f"after {out.steps} steps / {out.train_seconds:.0f} s "
          f"(direction error with reference activity: {out.trained_direction_le:.1f} deg)")
    print(out.trained.to_text())


if __name__ == "__main__":
    main()
