#!/usr/bin/env python3
"""Sweep the grasp threshold over seeded episodes and report the trend.

Runs the controller at each threshold, writes the raw sweep CSV, prints a
table, and checks the expected trend: a higher grasp threshold should not
reduce the per-attempt grasp success rate and should not reduce the number
of shifts spent per successful grasp.

    python3 scripts/run_sweep.py --grasp-weights runs/desk/weights/grasp.fcnq \
        --shift-weights runs/desk/weights/shift.fcnq --out sweep.csv
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from binpick.controller import ControllerConfig, threshold_sweep
from binpick.network import load_weights


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grasp-weights", required=True)
    ap.add_argument("--shift-weights", required=True)
    ap.add_argument("--out", required=True, help="sweep CSV path")
    ap.add_argument("--thresholds", default="0.2,0.4,0.6,0.75,0.9")
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--objects", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--band", type=float, default=0.03,
                    help="tolerated dip when checking the grasp-rate trend")
    args = ap.parse_args(argv)

    thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    rows = threshold_sweep(load_weights(args.grasp_weights),
                           load_weights(args.shift_weights),
                           thresholds, n_episodes=args.episodes,
                           n_objects=args.objects,
                           config=ControllerConfig(), seed=args.seed,
                           csv_path=args.out, jobs=args.jobs)

    header = f"{'threshold':>9}  {'grasp_rate':>10}  {'shifts/grasp':>12}  {'sim_pph':>8}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['grasp_threshold']:>9.2f}  {r['grasp_rate']:>10.3f}  "
              f"{r['shifts_per_grasp']:>12.3f}  {r['sim_pph']:>8.1f}")

    ok = True
    for prev, cur in zip(rows, rows[1:]):
        if cur["grasp_rate"] < prev["grasp_rate"] - args.band:
            print(f"trend violation: grasp_rate fell from "
                  f"{prev['grasp_rate']:.3f} to {cur['grasp_rate']:.3f} "
                  f"at threshold {cur['grasp_threshold']}")
            ok = False
        if cur["shifts_per_grasp"] < prev["shifts_per_grasp"] - 1e-9:
            print(f"trend violation: shifts_per_grasp fell from "
                  f"{prev['shifts_per_grasp']:.3f} to "
                  f"{cur['shifts_per_grasp']:.3f} "
                  f"at threshold {cur['grasp_threshold']}")
            ok = False
    print(f"wrote {args.out}")
    print("trend check:", "ok" if ok else "violated")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
