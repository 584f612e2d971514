"""Reward functions and the append-only attempt dataset.

Grasp attempts earn a binary reward (object removed or not). Shift attempts
earn the re-normalized change of the best windowed grasp probability around
the shift pose: r = (prob_after - prob_before + 1) / 2, so an ineffective
shift scores 0.5 and the extremes 0 and 1 are attained only by full swings.

A dataset is a directory with a JSON-lines manifest and one HMAP blob per
stored image. Records are immutable once appended; ids increase by one.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import defaults as dflt
from .actions import Action
from .heightmap import DepthImage, load_hmap, save_hmap
from .scene import PrimitiveOutcome

GRASP = "grasp"
SHIFT = "shift"
_KINDS = (GRASP, SHIFT)

GRASP_WINDOW_MM = 80.0
SHIFT_WINDOW_MM = 120.0


def grasp_reward(outcome: PrimitiveOutcome) -> float:
    """1.0 iff the grasp removed an object from the bin, else 0.0."""
    return 1.0 if outcome.success else 0.0


def shift_reward(prob_before: float, prob_after: float) -> float:
    """Normalized change of windowed grasp probability induced by a shift."""
    if not (0.0 <= prob_before <= 1.0 and 0.0 <= prob_after <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    return (prob_after - prob_before + 1.0) / 2.0


@dataclass(frozen=True)
class AttemptRecord:
    """One executed primitive: its observation window, pose, and payoff."""
    kind: str
    pre_window: DepthImage          # 31x31 rotated crop at the action pose
    action: Action
    reward: float
    seed: int
    timestamp: float = 0.0          # simulated seconds since collection start
    full_pre: DepthImage | None = None
    full_post: DepthImage | None = None   # shifts only: post-primitive view


def validate_record(record: AttemptRecord) -> None:
    if record.kind not in _KINDS:
        raise ValueError(f"unknown record kind {record.kind!r}")
    side = (dflt.WINDOW_SIDE, dflt.WINDOW_SIDE)
    if record.pre_window.shape != side:
        raise ValueError(f"pre_window must be {side}, got {record.pre_window.shape}")
    if not (0.0 <= record.reward <= 1.0):
        raise ValueError(f"reward {record.reward} outside [0, 1]")
    if record.kind == GRASP and record.reward not in (0.0, 1.0):
        raise ValueError("grasp rewards are binary")
    if record.kind == SHIFT and (record.full_pre is None or record.full_post is None):
        raise ValueError("shift records need both full pre and post images")


class Dataset:
    """Append-only record log with an HMAP blob store (one writer, many readers)."""

    MANIFEST = "manifest.jsonl"
    BLOB_DIR = "blobs"

    def __init__(self, root, create: bool = True):
        self.root = Path(root)
        self.blob_dir = self.root / self.BLOB_DIR
        self.manifest_path = self.root / self.MANIFEST
        if create:
            self.blob_dir.mkdir(parents=True, exist_ok=True)
            self.manifest_path.touch()
        elif not self.manifest_path.is_file():
            raise FileNotFoundError(f"no dataset manifest at {self.manifest_path}")
        self._index = self._scan()

    # ---------- reading ----------

    def _scan(self) -> list[dict]:
        entries = []
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"manifest line {lineno}: {exc}") from exc
                if entry.get("id") != len(entries):
                    raise ValueError(f"manifest line {lineno}: id {entry.get('id')} "
                                     f"breaks the monotonic sequence")
                entries.append(entry)
        return entries

    def __len__(self) -> int:
        return len(self._index)

    def count(self, kind: str) -> int:
        return sum(1 for e in self._index if e["kind"] == kind)

    def entry(self, rec_id: int) -> dict:
        """Raw manifest entry (no blob loading)."""
        return self._index[rec_id]

    def get(self, rec_id: int) -> AttemptRecord:
        e = self._index[rec_id]
        blobs = e["blobs"]
        load = lambda name: load_hmap(self.blob_dir / blobs[name]) if name in blobs else None
        return AttemptRecord(
            kind=e["kind"],
            pre_window=load("window"),
            action=Action(x=e["action"]["x"], y=e["action"]["y"],
                          a=e["action"]["a"], d=e["action"]["d"]),
            reward=e["reward"],
            seed=e["seed"],
            timestamp=e["timestamp"],
            full_pre=load("full_pre"),
            full_post=load("full_post"),
        )

    def __iter__(self):
        return (self.get(i) for i in range(len(self)))

    def records_of_kind(self, kind: str):
        return (self.get(i) for i in range(len(self)) if self._index[i]["kind"] == kind)

    # ---------- writing ----------

    def append(self, record: AttemptRecord) -> int:
        validate_record(record)
        rec_id = len(self._index)
        blobs = {"window": f"{rec_id:08d}_window.hmap"}
        save_hmap(record.pre_window, self.blob_dir / blobs["window"])
        if record.full_pre is not None:
            blobs["full_pre"] = f"{rec_id:08d}_pre.hmap"
            save_hmap(record.full_pre, self.blob_dir / blobs["full_pre"])
        if record.full_post is not None:
            blobs["full_post"] = f"{rec_id:08d}_post.hmap"
            save_hmap(record.full_post, self.blob_dir / blobs["full_post"])
        entry = {
            "id": rec_id,
            "kind": record.kind,
            "action": {"x": record.action.x, "y": record.action.y,
                       "a": record.action.a, "d": record.action.d},
            "reward": record.reward,
            "seed": record.seed,
            "timestamp": record.timestamp,
            "blobs": blobs,
        }
        line = json.dumps(entry, sort_keys=True, separators=(",", ":"))
        with open(self.manifest_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._index.append(entry)
        return rec_id

    # ---------- integrity & reporting ----------

    def validate(self) -> None:
        """Check that every referenced blob exists and no stray blobs remain."""
        referenced = set()
        for e in self._index:
            for name in e["blobs"].values():
                referenced.add(name)
                if not (self.blob_dir / name).is_file():
                    raise ValueError(f"record {e['id']}: missing blob {name}")
        on_disk = {p.name for p in self.blob_dir.glob("*.hmap")}
        stray = on_disk - referenced
        if stray:
            raise ValueError(f"{len(stray)} unreferenced blobs, e.g. {sorted(stray)[0]}")

    def stats(self) -> dict:
        out = {}
        for kind in _KINDS:
            rewards = np.array([e["reward"] for e in self._index if e["kind"] == kind])
            out[kind] = {
                "count": int(rewards.size),
                "reward_mean": float(rewards.mean()) if rewards.size else 0.0,
                "reward_std": float(rewards.std()) if rewards.size else 0.0,
            }
        g = out[GRASP]
        g["success_rate"] = g["reward_mean"]
        return out


def record_attempt(dataset: Dataset, record: AttemptRecord) -> int:
    """Durable append; returns the new record's id."""
    return dataset.append(record)


def relabel_shift_record(record: AttemptRecord, prob_fn) -> AttemptRecord:
    """Recompute a shift label from the stored full images.

    prob_fn(image, center, window_side) -> probability; the window is the
    shift-window square at the recorded action pose. Labels are derived
    lazily so they track the current grasp net.
    """
    if record.kind != SHIFT:
        raise ValueError("only shift records can be relabeled")
    cx, cy = _action_world_xy(record)
    center = (cx, cy, record.action.a)
    before = prob_fn(record.full_pre, center, SHIFT_WINDOW_MM)
    after = prob_fn(record.full_post, center, SHIFT_WINDOW_MM)
    return replace(record, reward=shift_reward(before, after))


def _action_world_xy(record: AttemptRecord) -> tuple[float, float]:
    from .actions import default_calibration
    cal = default_calibration()
    x, y = cal.grid_to_world(record.action.y, record.action.x,
                             record.action.angle_index)
    return float(x), float(y)
