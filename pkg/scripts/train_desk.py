#!/usr/bin/env python3
"""Run the full desk-scale training recipe: grasp net, then shift net.

Creates the run directories for the chosen config and drives the two CLI
training stages in order, so one command reproduces the trained weights:

    python3 scripts/train_desk.py --config configs/desk.json

Each stage refuses to append to an existing dataset; pass fresh run
directories (or delete the old ones) to retrain.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from binpick.cli import main as cli_main
from binpick.config import load_config


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--rounds-grasp", type=int, default=8)
    ap.add_argument("--rounds-shift", type=int, default=4)
    ap.add_argument("--oracle-labels", action="store_true",
                    help="label shift attempts from simulator state instead "
                         "of the trained grasp net")
    ap.add_argument("--skip-grasp", action="store_true",
                    help="reuse an already trained grasp net from weights_dir")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    cfg.weights_dir.mkdir(parents=True, exist_ok=True)
    cfg.data_dir.mkdir(parents=True, exist_ok=True)

    if not args.skip_grasp:
        t0 = time.monotonic()
        code = cli_main(["--config", args.config, "train-grasp",
                         "--rounds", str(args.rounds_grasp)])
        if code != 0:
            return code
        print(f"grasp stage done in {time.monotonic() - t0:.0f}s")

    grasp_weights = cfg.weights_dir / "grasp.fcnq"
    t0 = time.monotonic()
    shift_args = ["--config", args.config, "train-shift",
                  "--rounds", str(args.rounds_shift),
                  "--grasp-weights", str(grasp_weights)]
    if args.oracle_labels:
        shift_args.append("--oracle-labels")
    code = cli_main(shift_args)
    if code != 0:
        return code
    print(f"shift stage done in {time.monotonic() - t0:.0f}s")
    print(f"weights ready under {cfg.weights_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
