"""Tests for the two-threshold decision loop and its metrics."""

import csv
import json
import math

import numpy as np
import pytest

import binpick.controller as controller_mod
from binpick import defaults as dflt
from binpick.actions import QMap, default_calibration
from binpick.controller import (
    DECISION_EMPTY,
    DECISION_GRASP,
    DECISION_SHIFT,
    OUTCOME_EMPTY,
    OUTCOME_GRASP_STALL,
    OUTCOME_SHIFT_BUDGET,
    OUTCOME_SHIFT_LOOP,
    ControllerConfig,
    EpisodeMetrics,
    decide,
    run_episode,
    run_episodes,
    sweep_row,
    threshold_sweep,
    write_sweep_csv,
)
from binpick.grid import default_layout
from binpick.network import init_weights
from binpick.scene import DEFAULT_BIN, ObjectShape, ScenePose, SceneState


def constant_logit_weights(n_primitives: int, logit: float):
    w = init_weights(n_primitives, seed=0)
    for arr in w.params.values():
        arr[...] = 0.0
    w.params["conv6.bias"][...] = logit
    return w


def flat_qmap(n_primitives: int, value: float = 0.0) -> QMap:
    layout = default_layout()
    values = np.full(layout.valid_mask.shape + (n_primitives,), value, np.float32)
    return QMap(values, layout.valid_mask, layout.world_positions,
                default_calibration(layout))


def single_cube_scene() -> SceneState:
    cube = ObjectShape("box", (30.0, 30.0, 30.0))
    return SceneState(DEFAULT_BIN, [(cube, ScenePose(4.0, 4.0, 0.0))])


# ---------- decide ----------

def test_decide_grasp_above_threshold():
    assert decide(0.9, 0.0) == DECISION_GRASP


def test_decide_shift_when_reward_clears():
    assert decide(0.5, 0.7) == DECISION_SHIFT


def test_decide_empty_when_both_low():
    assert decide(0.5, 0.4) == DECISION_EMPTY


def test_decide_eight_case_threshold_table():
    cases = [
        (0.76, 0.61, DECISION_GRASP),
        (0.76, 0.59, DECISION_GRASP),
        (0.75, 0.61, DECISION_GRASP),   # grasp threshold is inclusive
        (0.75, 0.59, DECISION_GRASP),
        (0.74, 0.61, DECISION_SHIFT),
        (0.74, 0.60, DECISION_SHIFT),   # shift threshold is inclusive
        (0.74, 0.59, DECISION_EMPTY),
        (0.00, 0.00, DECISION_EMPTY),
    ]
    for prob, reward, expected in cases:
        assert decide(prob, reward) == expected, (prob, reward)


def test_decide_lazy_callable_only_runs_below_grasp_threshold():
    calls = []

    def reward():
        calls.append(1)
        return 0.9

    assert decide(0.8, reward) == DECISION_GRASP
    assert calls == []
    assert decide(0.5, reward) == DECISION_SHIFT
    assert calls == [1]


def test_decide_validates_ranges():
    with pytest.raises(ValueError):
        decide(1.2, 0.5)
    with pytest.raises(ValueError):
        decide(0.5, 1.2)
    decide(0.9, 1.2)  # out-of-range shift reward is never read on the grasp path


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(grasp_threshold=1.5)
    with pytest.raises(ValueError):
        ControllerConfig(shift_threshold=-0.1)
    with pytest.raises(ValueError):
        ControllerConfig(n_select_max=0)
    with pytest.raises(ValueError):
        ControllerConfig(max_shifts=-1)
    with pytest.raises(ValueError):
        ControllerConfig(max_consecutive_shifts=0)


# ---------- metrics ----------

def test_metrics_derived_values():
    m = EpisodeMetrics(grasp_attempts=10, grasp_successes=8, shift_count=4,
                       elapsed_s=100.0, objects_remaining=0, outcome=OUTCOME_EMPTY)
    assert m.grasp_rate == pytest.approx(0.8)
    assert m.shifts_per_grasp == pytest.approx(0.5)
    assert m.picks_per_hour == pytest.approx(3600.0 * 8 / 100.0)


def test_metrics_edge_values():
    empty = EpisodeMetrics(0, 0, 0, 0.0, 0, OUTCOME_EMPTY)
    assert math.isnan(empty.grasp_rate)
    assert empty.shifts_per_grasp == 0.0
    assert empty.picks_per_hour == 0.0
    stalled = EpisodeMetrics(0, 0, 3, 30.0, 2, OUTCOME_SHIFT_LOOP)
    assert math.isnan(stalled.shifts_per_grasp)


def test_metrics_validation():
    with pytest.raises(ValueError):
        EpisodeMetrics(1, 2, 0, 0.0, 0, OUTCOME_EMPTY)
    with pytest.raises(ValueError):
        EpisodeMetrics(1, 1, -1, 0.0, 0, OUTCOME_EMPTY)
    with pytest.raises(ValueError):
        EpisodeMetrics(1, 1, 0, 0.0, 0, "gave_up")


# ---------- run_episode with stub nets ----------

def test_empty_scene_immediate_bin_empty():
    wg = constant_logit_weights(dflt.N_GRASP_PRIMITIVES, -3.0)
    ws = constant_logit_weights(dflt.N_SHIFT_PRIMITIVES, -3.0)
    scene = SceneState(DEFAULT_BIN, [])
    metrics, trace = run_episode(scene, wg, ws)
    assert metrics.outcome == OUTCOME_EMPTY
    assert metrics.grasp_attempts == 0
    assert metrics.shift_count == 0
    assert metrics.elapsed_s == 0.0
    assert len(trace) == 1
    assert trace[0]["decision"] == DECISION_EMPTY
    assert trace[0]["action"] is None
    assert trace[0]["best_shift_reward"] is not None  # evaluated on this path


def test_grasp_stall_safeguard_and_shift_laziness():
    """A net that always says grasp keeps failing on thin air; the shift net
    must never be evaluated (poison object would raise) and the stall
    safeguard must end the episode."""
    wg = constant_logit_weights(dflt.N_GRASP_PRIMITIVES, 3.0)
    poison = object()
    metrics, trace = run_episode(single_cube_scene(), wg, poison)
    assert metrics.outcome == OUTCOME_GRASP_STALL
    assert metrics.grasp_attempts == 5
    assert metrics.grasp_successes == 0
    assert metrics.shift_count == 0
    assert metrics.objects_remaining == 1
    assert all(row["decision"] == DECISION_GRASP for row in trace)
    assert all(row["best_shift_reward"] is None for row in trace)


def test_shift_budget_safeguard():
    wg = constant_logit_weights(dflt.N_GRASP_PRIMITIVES, -3.0)
    ws = constant_logit_weights(dflt.N_SHIFT_PRIMITIVES, 3.0)
    metrics, trace = run_episode(single_cube_scene(), wg, ws)
    assert metrics.outcome == OUTCOME_SHIFT_BUDGET  # 3 x 1 object
    assert metrics.shift_count == 3
    assert metrics.grasp_attempts == 0
    assert all(row["decision"] == DECISION_SHIFT for row in trace)
    assert all(row["best_shift_reward"] is not None for row in trace)


def test_consecutive_shift_safeguard():
    wg = constant_logit_weights(dflt.N_GRASP_PRIMITIVES, -3.0)
    ws = constant_logit_weights(dflt.N_SHIFT_PRIMITIVES, 3.0)
    cfg = ControllerConfig(max_shifts=100)
    metrics, _ = run_episode(single_cube_scene(), wg, ws, cfg)
    assert metrics.outcome == OUTCOME_SHIFT_LOOP
    assert metrics.shift_count == cfg.max_consecutive_shifts


def test_scripted_success_path(monkeypatch):
    """Fake dense maps drive one successful grasp followed by BinEmpty."""
    grasp_tag, shift_tag = object(), object()
    graspy = flat_qmap(dflt.N_GRASP_PRIMITIVES)
    graspy.values[20, 20, 0, 1] = 0.9   # cell (20,20) angle 0 -> world (4, 4)
    low_g = flat_qmap(dflt.N_GRASP_PRIMITIVES)
    low_s = flat_qmap(dflt.N_SHIFT_PRIMITIVES)
    calls = {"grasp": 0, "shift": 0}

    def fake_evaluate(net, image, **kwargs):
        if net is grasp_tag:
            calls["grasp"] += 1
            return graspy if calls["grasp"] == 1 else low_g
        calls["shift"] += 1
        return low_s

    monkeypatch.setattr(controller_mod, "evaluate_q", fake_evaluate)
    metrics, trace = run_episode(single_cube_scene(), grasp_tag, shift_tag)
    assert metrics.outcome == OUTCOME_EMPTY
    assert metrics.grasp_attempts == 1
    assert metrics.grasp_successes == 1
    assert metrics.objects_remaining == 0
    assert metrics.elapsed_s > 0.0
    assert metrics.picks_per_hour > 0.0
    assert len(trace) == 2
    assert trace[0]["decision"] == DECISION_GRASP
    assert trace[0]["reward"] == 1.0
    assert trace[0]["action"] == {"x": 20, "y": 20, "a": 0.0, "d": 1}
    assert trace[1]["decision"] == DECISION_EMPTY
    assert calls == {"grasp": 2, "shift": 1}


def test_trace_file_round_trip(tmp_path):
    wg = constant_logit_weights(dflt.N_GRASP_PRIMITIVES, -3.0)
    ws = constant_logit_weights(dflt.N_SHIFT_PRIMITIVES, -3.0)
    path = tmp_path / "runs" / "trace.jsonl"
    metrics, trace = run_episode(single_cube_scene(), wg, ws, trace_path=path)
    lines = path.read_text().splitlines()
    assert [json.loads(line) for line in lines] == trace
    assert {"step", "best_grasp_prob", "best_shift_reward", "decision",
            "action", "reward", "elapsed"} == set(trace[0])


def test_run_episodes_deterministic():
    wg = constant_logit_weights(dflt.N_GRASP_PRIMITIVES, -3.0)
    ws = constant_logit_weights(dflt.N_SHIFT_PRIMITIVES, -3.0)
    a = run_episodes(wg, ws, n_episodes=3, n_objects=1, seed=7)
    b = run_episodes(wg, ws, n_episodes=3, n_objects=1, seed=7)
    assert a == b
    assert all(m.outcome == OUTCOME_EMPTY for m in a)


# ---------- sweep ----------

def test_sweep_row_aggregation():
    eps = [
        EpisodeMetrics(4, 3, 2, 50.0, 0, OUTCOME_EMPTY),
        EpisodeMetrics(6, 5, 2, 70.0, 0, OUTCOME_EMPTY),
    ]
    row = sweep_row(0.75, eps)
    assert row["episodes"] == 2
    assert row["grasp_rate"] == pytest.approx(8 / 10)
    assert row["shifts_per_grasp"] == pytest.approx(4 / 8)
    assert row["sim_pph"] == pytest.approx(3600.0 * 8 / 120.0)


def test_sweep_csv_format(tmp_path):
    rows = [sweep_row(0.2, [EpisodeMetrics(2, 2, 0, 30.0, 0, OUTCOME_EMPTY)]),
            sweep_row(0.9, [EpisodeMetrics(2, 1, 3, 60.0, 1, OUTCOME_SHIFT_BUDGET)])]
    path = tmp_path / "sweep.csv"
    write_sweep_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert "not comparable" in lines[0]
    parsed = list(csv.DictReader(lines[1:]))
    assert [p["grasp_threshold"] for p in parsed] == ["0.2", "0.9"]
    assert set(parsed[0]) == {"grasp_threshold", "episodes", "grasp_rate",
                              "shifts_per_grasp", "sim_pph"}


def test_threshold_sweep_end_to_end(tmp_path):
    wg = constant_logit_weights(dflt.N_GRASP_PRIMITIVES, -3.0)
    ws = constant_logit_weights(dflt.N_SHIFT_PRIMITIVES, -3.0)
    path = tmp_path / "sweep.csv"
    rows = threshold_sweep(wg, ws, thresholds=(0.2, 0.9), n_episodes=2,
                           n_objects=1, seed=3, csv_path=path)
    assert [r["grasp_threshold"] for r in rows] == [0.2, 0.9]
    assert all(r["episodes"] == 2 for r in rows)
    assert path.exists()
    with pytest.raises(ValueError):
        threshold_sweep(wg, ws, thresholds=(), n_episodes=1, n_objects=1)
