"""Shared fixtures: the desk-scale trained nets, cached between runs.

The desk run (full grasp + shift training at the default budgets) takes
tens of minutes, so its weights, datasets, and timing metadata are cached
under .cache/ keyed by the training configuration; delete .cache/ to force
a from-scratch retrain.
"""

import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
DESK_CACHE_VERSION = "desk-v1"


def _progress(stage):
    def cb(done, total, clock):
        print(f"[desk {stage}] {done}/{total} attempts "
              f"({clock:.0f} simulated s)", file=sys.stderr, flush=True)
    return cb


@pytest.fixture(scope="session")
def desk_run():
    """Train (or load) the desk-scale grasp and shift nets.

    Returns a dict with the two weight stores, the run config, the wall
    time each training stage took, and the grasp net's held-out accuracy.
    """
    from binpick.config import load_config
    from binpick.network import load_weights, save_weights
    from binpick.rewards import GRASP
    from binpick.training import (
        held_out_accuracy,
        train_grasp_pipeline,
        train_shift_pipeline,
    )

    cfg = load_config(REPO_ROOT / "configs" / "desk.json")
    key_src = json.dumps(asdict(cfg.train), sort_keys=True, default=str)
    key = hashlib.sha1((key_src + DESK_CACHE_VERSION).encode()).hexdigest()[:12]
    cache = REPO_ROOT / ".cache" / f"desk-{key}"
    meta_path = cache / "meta.json"

    if not meta_path.exists():
        cache.mkdir(parents=True, exist_ok=True)
        t0 = time.monotonic()
        grasp_w, grasp_ds, _ = train_grasp_pipeline(
            cfg.train, cache / "grasp_data", progress_cb=_progress("grasp"))
        grasp_s = time.monotonic() - t0
        accuracy = held_out_accuracy(grasp_w, grasp_ds, GRASP, cfg.train)
        save_weights(grasp_w, cache / "grasp.fcnq")

        t0 = time.monotonic()
        shift_w, _, _ = train_shift_pipeline(
            cfg.train, grasp_w, cache / "shift_data",
            progress_cb=_progress("shift"))
        shift_s = time.monotonic() - t0
        save_weights(shift_w, cache / "shift.fcnq")

        meta_path.write_text(json.dumps({
            "grasp_train_s": grasp_s,
            "shift_train_s": shift_s,
            "held_out_accuracy": accuracy,
        }))

    meta = json.loads(meta_path.read_text())
    return {
        "grasp": load_weights(cache / "grasp.fcnq"),
        "shift": load_weights(cache / "shift.fcnq"),
        "config": cfg,
        **meta,
    }
