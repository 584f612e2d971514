"""Exploration strategies for self-supervised data collection.

Four samplers over the action grid — uniform random, self-information
(probability proportional to the estimated value), maximum MC-dropout
variance, and most-uncertain outcome (value closest to 0.5) — plus a
progress-dependent schedule that mixes them with greedy exploitation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import defaults as dflt
from . import grid
from .actions import Action, QMap
from .heightmap import DepthImage, pre_rotate, to_net_input
from .network import WeightStore, mc_dropout_variance_dense

RANDOM = "random"
SELF_INFO = "self_info"
UNCERTAIN_PREDICTION = "uncertain_prediction"
UNCERTAIN_OUTCOME = "uncertain_outcome"
GREEDY = "greedy"
STRATEGIES = (RANDOM, SELF_INFO, UNCERTAIN_PREDICTION, UNCERTAIN_OUTCOME, GREEDY)

DEFAULT_N_MC = 16


@dataclass(frozen=True)
class ExplorationSchedule:
    """Piecewise-constant strategy mixture over collection progress in [0, 1].

    Each phase is (start_progress, weights); the phase whose start is the
    largest one <= progress applies. Weights are a distribution over
    strategy tags.
    """
    phases: tuple[tuple[float, dict[str, float]], ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("schedule needs at least one phase")
        starts = [p[0] for p in self.phases]
        if starts[0] != 0.0:
            raise ValueError("first phase must start at progress 0")
        if sorted(starts) != starts or len(set(starts)) != len(starts):
            raise ValueError("phase starts must be strictly increasing")
        for start, weights in self.phases:
            if not weights:
                raise ValueError(f"phase at {start} has no weights")
            for name, w in weights.items():
                if name not in STRATEGIES:
                    raise ValueError(f"unknown strategy {name!r}")
                if w < 0:
                    raise ValueError(f"negative weight for {name}")
            total = sum(weights.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"phase at {start}: weights sum to {total}, not 1")

    def weights_at(self, progress: float) -> dict[str, float]:
        if not (0.0 <= progress <= 1.0):
            raise ValueError("progress must lie in [0, 1]")
        current = self.phases[0][1]
        for start, weights in self.phases:
            if progress >= start:
                current = weights
        return current


def default_schedule() -> ExplorationSchedule:
    """Pure random warm-up for the first 15% of collection, then a fixed
    mixture dominated by self-information, with greedy exploitation filling
    the remainder."""
    return ExplorationSchedule((
        (0.0, {RANDOM: 1.0}),
        (0.15, {SELF_INFO: 0.60, UNCERTAIN_PREDICTION: 0.20,
                UNCERTAIN_OUTCOME: 0.05, GREEDY: 0.15}),
    ))


def pick_strategy(schedule: ExplorationSchedule, progress: float, seed: int = 0) -> str:
    """Categorical draw from the schedule's mixture at the given progress."""
    weights = schedule.weights_at(progress)
    names = [s for s in STRATEGIES if s in weights]
    probs = np.array([weights[s] for s in names], dtype=np.float64)
    cdf = np.cumsum(probs / probs.sum())
    u = np.random.default_rng(seed).random()
    return names[int(np.searchsorted(cdf, u, side="right").clip(0, len(names) - 1))]


# ---------- samplers ----------

def _action_from_flat(q: QMap, flat: int) -> Action:
    i, j, k, d = np.unravel_index(int(flat), q.values.shape)
    return Action(x=int(j), y=int(i), a=float(q.calibration.angles[k]), d=int(d))


def sample_uniform(q: QMap, seed: int = 0) -> Action:
    """Uniform over bin-interior grid cells x angles x primitives."""
    mask = np.broadcast_to(q.valid[..., None], q.values.shape)
    candidates = np.flatnonzero(mask.reshape(-1))
    if candidates.size == 0:
        raise ValueError("no valid actions to sample")
    pick = candidates[np.random.default_rng(seed).integers(candidates.size)]
    return _action_from_flat(q, pick)


def sample_self_information(q: QMap, seed: int = 0) -> Action:
    """Draw an action with probability proportional to its estimated value.

    Falls back to uniform when the masked map is all zero. Invariant to
    positive rescaling of the values.
    """
    scores = np.where(q.valid[..., None], np.abs(q.values), 0.0).reshape(-1)
    total = scores.sum(dtype=np.float64)
    if total <= 0.0:
        return sample_uniform(q, seed)
    cdf = np.cumsum(scores / total, dtype=np.float64)
    u = np.random.default_rng(seed).random()
    pick = int(np.searchsorted(cdf, u, side="right").clip(0, scores.size - 1))
    # guard against landing on a zero-probability tail slot
    while scores[pick] == 0.0 and pick > 0:
        pick -= 1
    return _action_from_flat(q, pick)


def sample_uncertain_outcome(q: QMap, seed: int = 0) -> Action:
    """Action whose estimate is closest to the 0.5 decision boundary
    (lexicographic first on ties); for binary-reward nets."""
    cost = np.where(q.valid[..., None], np.abs(q.values - 0.5), np.inf)
    flat = int(np.argmin(cost.reshape(-1)))
    if not np.isfinite(cost.reshape(-1)[flat]):
        raise ValueError("no valid actions to sample")
    return _action_from_flat(q, flat)


def sample_uncertain_prediction(weights: WeightStore, observation,
                                n_mc: int = DEFAULT_N_MC, seed: int = 0,
                                layout=None, cell_stride: int = 2,
                                angle_stride: int = 2,
                                dropout_rates=None) -> Action:
    """Action maximizing the MC-dropout variance of the dense output.

    The variance map is evaluated on a subsampled grid (every cell_stride-th
    cell, every angle_stride-th rotation) to bound the number of dense
    passes; ties break lexicographic first. observation may be a DepthImage
    or a QMap carrying its pre-rotated net inputs.
    """
    layout = layout or grid.default_layout()
    if isinstance(observation, QMap):
        if observation.pre_rotated is None:
            raise ValueError("QMap observation lacks pre-rotated inputs")
        nets = observation.pre_rotated
        valid = observation.valid
        angles = observation.calibration.angles
    elif isinstance(observation, DepthImage):
        nets = np.stack([to_net_input(pre_rotate(observation, float(th)))
                         for th in layout.angles])
        valid = layout.valid_mask
        angles = tuple(float(a) for a in layout.angles)
    else:
        raise TypeError("observation must be a DepthImage or QMap")
    angle_ids = np.arange(0, nets.shape[0], angle_stride)
    var = mc_dropout_variance_dense(weights, nets[angle_ids], n_mc, seed=seed,
                                    dropout_rates=dropout_rates)
    score = var.transpose(1, 2, 0, 3)                 # (G, G, Ks, |M|)
    keep = valid[:, :, angle_ids].copy()
    keep[np.arange(keep.shape[0]) % cell_stride != 0, :, :] = False
    keep[:, np.arange(keep.shape[1]) % cell_stride != 0, :] = False
    masked = np.where(keep[..., None], score, -1.0)
    flat = int(np.argmax(masked.reshape(-1)))
    if masked.reshape(-1)[flat] < 0:
        raise ValueError("no valid actions to sample")
    i, j, ks, d = np.unravel_index(flat, masked.shape)
    k = int(angle_ids[ks])
    return Action(x=int(j), y=int(i), a=float(angles[k]), d=int(d))


def invert_scores(q: QMap) -> QMap:
    """Value map preferring LOW estimates (for the lower-the-probability
    curriculum): scores become 1 - value, so every sampler and the greedy
    selector chase decreases instead of increases."""
    return QMap(np.asarray(1.0 - q.values, dtype=np.float32), q.valid,
                q.world_positions, q.calibration, q.pre_rotated)
