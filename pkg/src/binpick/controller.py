"""Combined grasp/shift decision loop over a simulated bin.

The controller reads the grasp map first; only when no pose clears the
grasp threshold does it evaluate the shift map (the trace records the
skipped evaluation as null). A shift is executed when its best estimated
reward clears the shift threshold, otherwise the bin is declared empty.
Safeguard counters bound runaway episodes and are reported as outcomes
distinct from an empty bin.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .actions import QMap, evaluate_q, max_estimate, select_action
from .heightmap import apply_sensor_noise, render_heightmap
from .network import InferenceEngine
from .scene import (
    DEFAULT_BIN,
    DEFAULT_TIME_MODEL,
    BinSpec,
    SceneState,
    TimeModel,
    execute_grasp,
    execute_shift,
    scene_digest,
    spawn_scene,
)

DECISION_GRASP = "grasp"
DECISION_SHIFT = "shift"
DECISION_EMPTY = "bin_empty"

OUTCOME_EMPTY = "bin_empty"
OUTCOME_SHIFT_BUDGET = "shift_budget_exhausted"
OUTCOME_SHIFT_LOOP = "consecutive_shift_limit"
OUTCOME_GRASP_STALL = "consecutive_grasp_failure_limit"

_FAILURE_OUTCOMES = (OUTCOME_SHIFT_BUDGET, OUTCOME_SHIFT_LOOP, OUTCOME_GRASP_STALL)

# sweep CSV disclaimer: the time model is simulated, not robot hardware
SWEEP_CSV_COMMENT = ("# sim_pph uses the declared simulated time model; "
                     "values are not comparable to hardware picks-per-hour")


@dataclass(frozen=True)
class ControllerConfig:
    """Thresholds and safeguards for the decision loop."""
    grasp_threshold: float = 0.75
    shift_threshold: float = 0.6
    n_select_max: int = 1               # selection breadth of the action picker
    max_shifts: int | None = None       # total budget; None = 3 x object count
    max_consecutive_shifts: int = 5     # shifts since the last grasp attempt
    max_consecutive_failures: int = 5   # failed grasps since the last
                                        # success/shift
    noise_sigma_mm: float = 0.0         # per-step seeded observation noise
    noise_patches: int = 0              # invalid dropout patches per render

    def __post_init__(self):
        for name in ("grasp_threshold", "shift_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_select_max < 1:
            raise ValueError("n_select_max must be >= 1")
        if self.max_shifts is not None and self.max_shifts < 0:
            raise ValueError("max_shifts must be >= 0")
        if self.max_consecutive_shifts < 1 or self.max_consecutive_failures < 1:
            raise ValueError("consecutive safeguards must be >= 1")
        if self.noise_sigma_mm < 0 or self.noise_patches < 0:
            raise ValueError("observation noise settings must be >= 0")


@dataclass(frozen=True)
class EpisodeMetrics:
    """Aggregated counters of one controller episode."""
    grasp_attempts: int
    grasp_successes: int
    shift_count: int
    elapsed_s: float
    objects_remaining: int
    outcome: str

    def __post_init__(self):
        if not 0 <= self.grasp_successes <= self.grasp_attempts:
            raise ValueError("successes must lie in [0, attempts]")
        if self.shift_count < 0 or self.elapsed_s < 0 or self.objects_remaining < 0:
            raise ValueError("counters must be non-negative")
        if self.outcome not in (OUTCOME_EMPTY,) + _FAILURE_OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")

    @property
    def grasp_rate(self) -> float:
        if self.grasp_attempts == 0:
            return float("nan")
        return self.grasp_successes / self.grasp_attempts

    @property
    def shifts_per_grasp(self) -> float:
        if self.grasp_successes == 0:
            return 0.0 if self.shift_count == 0 else float("nan")
        return self.shift_count / self.grasp_successes

    @property
    def picks_per_hour(self) -> float:
        if self.elapsed_s <= 0.0:
            return 0.0
        return 3600.0 * self.grasp_successes / self.elapsed_s


def decide(best_grasp_prob: float, best_shift_reward,
           config: ControllerConfig = ControllerConfig()) -> str:
    """Pure two-threshold decision.

    best_shift_reward may be a float or a zero-argument callable; the
    callable is invoked only when the grasp branch is rejected, so passing
    the shift-net evaluation as a callable makes its laziness observable.
    """
    if not 0.0 <= best_grasp_prob <= 1.0:
        raise ValueError("best_grasp_prob outside [0, 1]")
    if best_grasp_prob >= config.grasp_threshold:
        return DECISION_GRASP
    value = best_shift_reward() if callable(best_shift_reward) else best_shift_reward
    if not 0.0 <= value <= 1.0:
        raise ValueError("best_shift_reward outside [0, 1]")
    if value >= config.shift_threshold:
        return DECISION_SHIFT
    return DECISION_EMPTY


def _seed_tuple(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


class _EpisodeCache:
    """Per-scene-content memo of the two dense maps (failed actions leave
    the scene bit-identical, so the maps are reusable)."""

    def __init__(self):
        self.digest = None
        self.maps: dict[str, QMap] = {}

    def sync(self, scene: SceneState) -> None:
        d = scene_digest(scene)
        if d != self.digest:
            self.digest = d
            self.maps.clear()

    def get(self, key: str, compute) -> QMap:
        q = self.maps.get(key)
        if q is None:
            q = self.maps[key] = compute()
        return q


def run_episode(scene: SceneState, grasp_net, shift_net,
                config: ControllerConfig = ControllerConfig(), seed=0,
                trace_path=None, time_model: TimeModel = DEFAULT_TIME_MODEL):
    """Run the decision loop until the bin empties or a safeguard fires.

    grasp_net / shift_net may be weight stores or prebuilt inference
    engines. Returns (EpisodeMetrics, trace), where trace is a list of
    per-step dicts; trace_path additionally writes it as JSON lines. The
    shift map is evaluated lazily: steps decided as grasps record a null
    shift estimate.
    """
    max_shifts = (config.max_shifts if config.max_shifts is not None
                  else 3 * len(scene.objects))
    base_seed = _seed_tuple(seed)
    cache = _EpisodeCache()
    trace = []
    attempts = successes = shifts = 0
    consecutive_shifts = consecutive_failures = 0
    elapsed = 0.0
    outcome_tag = None
    step = 0
    noisy = config.noise_sigma_mm > 0 or config.noise_patches > 0
    while True:
        cache.sync(scene)
        image = render_heightmap(scene)
        if noisy:
            # re-observing an unchanged scene now differs per step, so the
            # per-scene map cache must not serve stale estimates
            image = apply_sensor_noise(
                image, np.random.default_rng((*base_seed, step, 7)),
                height_std_mm=config.noise_sigma_mm,
                n_invalid_patches=config.noise_patches)
            q_g = evaluate_q(grasp_net, image)
        else:
            q_g = cache.get("grasp", lambda: evaluate_q(grasp_net, image))
        best_prob = max_estimate(q_g)

        shift_estimate = None
        q_s_box = []

        def lazy_shift() -> float:
            if noisy:
                q_s_box.append(evaluate_q(shift_net, image))
            else:
                q_s_box.append(cache.get("shift",
                                         lambda: evaluate_q(shift_net, image)))
            return max_estimate(q_s_box[0])

        decision = decide(best_prob, lazy_shift, config)
        if q_s_box:
            shift_estimate = max_estimate(q_s_box[0])

        row = {"step": step, "best_grasp_prob": best_prob,
               "best_shift_reward": shift_estimate, "decision": decision,
               "action": None, "reward": None, "elapsed": elapsed}

        if decision == DECISION_EMPTY:
            trace.append(row)
            outcome_tag = OUTCOME_EMPTY
            break

        if decision == DECISION_GRASP:
            action = select_action(q_g, config.n_select_max, (*base_seed, step))
            wx, wy = q_g.calibration.grid_to_world(action.y, action.x,
                                                   action.angle_index)
            result = execute_grasp(scene, float(wx), float(wy), action.a,
                                   action.d, time_model=time_model)
            attempts += 1
            consecutive_shifts = 0
            if result.success:
                successes += 1
                consecutive_failures = 0
            else:
                consecutive_failures += 1
            row["reward"] = 1.0 if result.success else 0.0
        else:
            q_s = q_s_box[0]
            action = select_action(q_s, config.n_select_max, (*base_seed, step))
            wx, wy = q_s.calibration.grid_to_world(action.y, action.x,
                                                   action.angle_index)
            result = execute_shift(scene, float(wx), float(wy), action.a,
                                   action.d, time_model=time_model)
            shifts += 1
            consecutive_shifts += 1
            consecutive_failures = 0

        elapsed += result.sim_duration
        scene = result.new_scene
        row["action"] = {"x": action.x, "y": action.y, "a": action.a,
                         "d": action.d}
        row["elapsed"] = elapsed
        trace.append(row)
        step += 1

        if shifts >= max_shifts and decision == DECISION_SHIFT:
            outcome_tag = OUTCOME_SHIFT_BUDGET
            break
        if consecutive_shifts >= config.max_consecutive_shifts:
            outcome_tag = OUTCOME_SHIFT_LOOP
            break
        if consecutive_failures >= config.max_consecutive_failures:
            outcome_tag = OUTCOME_GRASP_STALL
            break

    metrics = EpisodeMetrics(grasp_attempts=attempts, grasp_successes=successes,
                             shift_count=shifts, elapsed_s=elapsed,
                             objects_remaining=len(scene.objects),
                             outcome=outcome_tag)
    if trace_path is not None:
        path = Path(trace_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for row in trace:
                fh.write(json.dumps(row, sort_keys=True,
                                    separators=(",", ":")) + "\n")
    return metrics, trace


def run_episodes(grasp_net, shift_net, n_episodes: int, n_objects: int,
                 config: ControllerConfig = ControllerConfig(), seed=0,
                 bin_spec: BinSpec = DEFAULT_BIN, jobs: int = 1,
                 time_model: TimeModel = DEFAULT_TIME_MODEL,
                 traces_dir=None) -> list[EpisodeMetrics]:
    """Seeded independent episodes over freshly spawned scenes.

    With traces_dir set, episode i's decision trace is written to
    episode_{i:04d}.jsonl inside it.
    """
    engine_g = grasp_net if isinstance(grasp_net, InferenceEngine) else InferenceEngine(grasp_net)
    engine_s = shift_net if isinstance(shift_net, InferenceEngine) else InferenceEngine(shift_net)
    base = _seed_tuple(seed)

    def one(i: int) -> EpisodeMetrics:
        scene = spawn_scene(n_objects, seed=(*base, 101, i), bin_spec=bin_spec)
        trace_path = (Path(traces_dir) / f"episode_{i:04d}.jsonl"
                      if traces_dir is not None else None)
        metrics, _ = run_episode(scene, engine_g, engine_s, config,
                                 seed=(*base, 102, i), time_model=time_model,
                                 trace_path=trace_path)
        return metrics

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(n_episodes)))
    return [one(i) for i in range(n_episodes)]


def sweep_row(threshold: float, episodes: list[EpisodeMetrics]) -> dict:
    """Aggregate one sweep point (attempt-weighted across episodes)."""
    attempts = sum(m.grasp_attempts for m in episodes)
    successes = sum(m.grasp_successes for m in episodes)
    shifts = sum(m.shift_count for m in episodes)
    elapsed = sum(m.elapsed_s for m in episodes)
    return {
        "grasp_threshold": threshold,
        "episodes": len(episodes),
        "grasp_rate": successes / attempts if attempts else float("nan"),
        "shifts_per_grasp": (shifts / successes if successes
                             else (0.0 if shifts == 0 else float("nan"))),
        "sim_pph": 3600.0 * successes / elapsed if elapsed > 0 else 0.0,
    }


def threshold_sweep(grasp_net, shift_net, thresholds, n_episodes: int,
                    n_objects: int, config: ControllerConfig = ControllerConfig(),
                    seed=0, bin_spec: BinSpec = DEFAULT_BIN, csv_path=None,
                    jobs: int = 1) -> list[dict]:
    """Evaluate the grasp threshold over a fixed seeded scene set.

    The same scene seeds are reused at every threshold so points differ
    only by the controller setting. Returns one aggregate row per
    threshold; csv_path additionally writes them as CSV (with a header
    comment flagging that simulated PPH is not a hardware number).
    """
    if not thresholds:
        raise ValueError("need at least one threshold")
    engine_g = grasp_net if isinstance(grasp_net, InferenceEngine) else InferenceEngine(grasp_net)
    engine_s = shift_net if isinstance(shift_net, InferenceEngine) else InferenceEngine(shift_net)
    rows = []
    for thr in thresholds:
        cfg = replace(config, grasp_threshold=float(thr))
        episodes = run_episodes(engine_g, engine_s, n_episodes, n_objects,
                                cfg, seed=seed, bin_spec=bin_spec, jobs=jobs)
        rows.append(sweep_row(float(thr), episodes))
    if csv_path is not None:
        write_sweep_csv(rows, csv_path)
    return rows


def write_sweep_csv(rows: list[dict], csv_path) -> None:
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["grasp_threshold", "episodes", "grasp_rate", "shifts_per_grasp",
              "sim_pph"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SWEEP_CSV_COMMENT + "\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
