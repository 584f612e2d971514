"""Self-supervised data collection and network training.

Collection alternates scene simulation with exploration-guided action
selection; the grasp net labels come from simulated grasp outcomes, the
shift net labels from the change in windowed grasp probability. A two-mode
curriculum keeps shift collection productive: it raises the best grasp
probability until the scene is easy, then deliberately lowers it again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import defaults as dflt
from .actions import (
    Action,
    QMap,
    action_window,
    default_calibration,
    evaluate_q,
    max_grasp_prob,
    select_action,
    window_grasp_prob,
)
from .explore import (
    GREEDY,
    RANDOM,
    SELF_INFO,
    UNCERTAIN_OUTCOME,
    UNCERTAIN_PREDICTION,
    ExplorationSchedule,
    default_schedule,
    invert_scores,
    pick_strategy,
    sample_self_information,
    sample_uncertain_outcome,
    sample_uncertain_prediction,
    sample_uniform,
)
from .heightmap import render_heightmap, to_net_input
from .network import (
    InferenceEngine,
    SgdMomentum,
    WeightStore,
    backward,
    forward_batch,
    init_weights,
    save_weights,
)
from .rewards import (
    GRASP,
    SHIFT,
    SHIFT_WINDOW_MM,
    AttemptRecord,
    Dataset,
    grasp_reward,
    relabel_shift_record,
    shift_reward,
)
from .scene import (
    DEFAULT_BIN,
    BinSpec,
    SceneState,
    execute_grasp,
    execute_shift,
    oracle_window_grasp_prob,
    scene_digest,
    spawn_scene,
)

# seed-stream tags so every random decision draws from its own substream
_SEED_STRATEGY = 1
_SEED_SAMPLER = 2
_SEED_SPAWN = 3
_SEED_MC = 4
_SEED_SPLIT = 20
_SEED_BATCH = 21
_SEED_DROPOUT = 22


@dataclass
class TrainConfig:
    """Desk-scale defaults for collection and optimization."""
    n_attempts: int = 5000              # grasp collection budget
    n_shift_attempts: int = 1000        # shift collection budget
    batch_size: int = 32
    n_steps: int = 6000                 # total optimizer steps
    learning_rate: float = 1e-3
    momentum: float = 0.9
    loss: str | None = None             # None: bce for grasp, mse for shift
    seed: int = 0
    n_select_max: int = 5               # greedy selection breadth while training
    object_curriculum: tuple[int, ...] = (1, 3, 10)
    attempts_per_scene: int = 8
    schedule: ExplorationSchedule = field(default_factory=default_schedule)
    n_mc: int = 4                       # MC-dropout passes for exploration
    val_fraction: float = 0.1
    eval_every: int = 200
    checkpoint_every: int = 0           # optimizer steps between checkpoints; 0 = off
    oracle_shift_labels: bool = True    # label shifts from the scene oracle
    combined_fraction: float = 0.1      # tail of shift collection run by the controller
    grasp_threshold: float = 0.75       # combined-phase grasp trigger

    def __post_init__(self):
        for name in ("n_attempts", "n_shift_attempts", "batch_size", "n_steps",
                     "attempts_per_scene", "n_select_max", "n_mc"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.object_curriculum or min(self.object_curriculum) < 1:
            raise ValueError("object curriculum needs positive counts")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class CurriculumState:
    """Raise/lower hysteresis over the scene's best grasp probability."""
    mode: str = "increase"
    low: float = 0.2
    high: float = 0.8

    def __post_init__(self):
        if self.mode not in ("increase", "decrease"):
            raise ValueError(f"unknown curriculum mode {self.mode!r}")
        if not self.low < self.high:
            raise ValueError("hysteresis needs low < high")


def curriculum_step(state: CurriculumState, best_grasp_prob: float) -> CurriculumState:
    """Flip to lowering when the scene became easy, back to raising when hard."""
    if not 0.0 <= best_grasp_prob <= 1.0:
        raise ValueError("probability outside [0, 1]")
    if state.mode == "increase" and best_grasp_prob >= state.high:
        return replace(state, mode="decrease")
    if state.mode == "decrease" and best_grasp_prob < state.low:
        return replace(state, mode="increase")
    return state


def object_count_at(curriculum: tuple[int, ...], progress: float) -> int:
    """Piecewise-constant object count over collection progress."""
    idx = min(int(progress * len(curriculum)), len(curriculum) - 1)
    return curriculum[idx]


def _empty_qmap(n_primitives: int, layout=None) -> QMap:
    from . import grid
    layout = layout or grid.default_layout()
    values = np.zeros(layout.valid_mask.shape + (n_primitives,), np.float32)
    return QMap(values, layout.valid_mask, layout.world_positions,
                default_calibration(layout))


class _SceneCache:
    """Single-slot memo of per-scene-content dense evaluations and MC picks.

    Failed grasps and empty shifts leave the scene bit-identical, so a run
    of consecutive attempts often sees the same content; keying on the
    scene digest skips the dense re-evaluation. The MC-dropout pick is
    seeded from the digest, making it a deterministic function of scene
    content, so memoizing it is exact rather than approximate.
    """
    __slots__ = ("digest", "qmaps", "mc_action")

    def __init__(self):
        self.digest = None
        self.qmaps: dict[str, QMap] = {}
        self.mc_action: Action | None = None

    def sync(self, scene: SceneState) -> None:
        d = scene_digest(scene)
        if d != self.digest:
            self.digest = d
            self.qmaps.clear()
            self.mc_action = None

    def qmap(self, key: str, compute) -> QMap:
        q = self.qmaps.get(key)
        if q is None:
            q = self.qmaps[key] = compute()
        return q


def _sample_action(strategy: str, scores: QMap, weights: WeightStore,
                   config: TrainConfig, seed,
                   cache: _SceneCache | None = None) -> Action:
    if strategy == RANDOM:
        return sample_uniform(scores, seed)
    if strategy == SELF_INFO:
        return sample_self_information(scores, seed)
    if strategy == UNCERTAIN_OUTCOME:
        return sample_uncertain_outcome(scores, seed)
    if strategy == UNCERTAIN_PREDICTION:
        if cache is not None and cache.mc_action is not None:
            return cache.mc_action
        if cache is not None and cache.digest is not None:
            seed = (config.seed, _SEED_MC,
                    int.from_bytes(cache.digest[:8], "little"))
        action = sample_uncertain_prediction(weights, scores,
                                             n_mc=config.n_mc, seed=seed)
        if cache is not None:
            cache.mc_action = action
        return action
    if strategy == GREEDY:
        return select_action(scores, config.n_select_max, seed)
    raise ValueError(f"unknown strategy {strategy!r}")


class _SceneRotation:
    """Respawns scenes as they empty, go stale, or the curriculum grows."""

    def __init__(self, config: TrainConfig, bin_spec: BinSpec, stream: int):
        self.config = config
        self.bin_spec = bin_spec
        self.stream = stream
        self.counter = 0
        self.attempts_on_scene = 0
        self.scene: SceneState | None = None

    def current(self, progress: float) -> SceneState:
        want = object_count_at(self.config.object_curriculum, progress)
        if (self.scene is None or not self.scene.objects
                or self.attempts_on_scene >= self.config.attempts_per_scene):
            self.scene = spawn_scene(
                want, seed=(self.config.seed, _SEED_SPAWN, self.stream, self.counter),
                bin_spec=self.bin_spec)
            self.counter += 1
            self.attempts_on_scene = 0
        return self.scene

    def advance(self, new_scene: SceneState) -> None:
        self.scene = new_scene
        self.attempts_on_scene += 1


def run_grasp_collection(config: TrainConfig, weights: WeightStore,
                         dataset: Dataset, n_attempts: int | None = None,
                         start_attempt: int = 0, total_attempts: int | None = None,
                         bin_spec: BinSpec = DEFAULT_BIN, clock: float = 0.0,
                         rotation: _SceneRotation | None = None) -> float:
    """Collect grasp attempts into the dataset; returns the simulated clock.

    Rendering, dense evaluation, exploration, primitive execution, and
    labeling are all deterministic functions of (config.seed, attempt index).
    """
    n_attempts = n_attempts if n_attempts is not None else config.n_attempts
    total = total_attempts if total_attempts is not None else config.n_attempts
    engine = InferenceEngine(weights)
    cal = default_calibration()
    rotation = rotation or _SceneRotation(config, bin_spec, stream=0)
    cache = _SceneCache()
    for local in range(n_attempts):
        i = start_attempt + local
        progress = i / max(total, 1)
        scene = rotation.current(progress)
        cache.sync(scene)
        image = render_heightmap(scene)
        strategy = pick_strategy(config.schedule, min(progress, 1.0),
                                 seed=(config.seed, _SEED_STRATEGY, i))
        if strategy == RANDOM:
            q = _empty_qmap(weights.n_primitives)
        else:
            q = cache.qmap("g", lambda: evaluate_q(engine, image))
        action = _sample_action(strategy, q, weights, config,
                                seed=(config.seed, _SEED_SAMPLER, i), cache=cache)
        wx, wy = cal.grid_to_world(action.y, action.x, action.angle_index)
        outcome = execute_grasp(scene, float(wx), float(wy), action.a, action.d)
        clock += outcome.sim_duration
        dataset.append(AttemptRecord(
            kind=GRASP, pre_window=action_window(image, action, cal),
            action=action, reward=grasp_reward(outcome), seed=i, timestamp=clock))
        rotation.advance(outcome.new_scene)
    return clock


def run_shift_collection(config: TrainConfig, grasp_weights: WeightStore,
                         shift_weights: WeightStore, dataset: Dataset,
                         n_attempts: int | None = None, start_attempt: int = 0,
                         total_attempts: int | None = None,
                         bin_spec: BinSpec = DEFAULT_BIN, clock: float = 0.0,
                         rotation: _SceneRotation | None = None,
                         state: CurriculumState | None = None) -> tuple[float, CurriculumState]:
    """Collect shift attempts under the raise/lower curriculum.

    Labels are the change in windowed grasp probability around the shift
    pose — from the scene oracle when config.oracle_shift_labels is set,
    otherwise from the current grasp net. The final combined_fraction of the
    budget instead runs the combined controller greedily (grasp when the
    best grasp probability clears the threshold, shift otherwise) so the
    dataset sees the deployed policy's states; curriculum phases never grasp.
    """
    n_attempts = n_attempts if n_attempts is not None else config.n_shift_attempts
    total = total_attempts if total_attempts is not None else config.n_shift_attempts
    engine_g = InferenceEngine(grasp_weights)
    engine_s = InferenceEngine(shift_weights)
    cal = default_calibration()
    rotation = rotation or _SceneRotation(config, bin_spec, stream=1)
    state = state or CurriculumState()
    cache = _SceneCache()
    for local in range(n_attempts):
        i = start_attempt + local
        progress = i / max(total, 1)
        combined = progress >= 1.0 - config.combined_fraction
        scene = rotation.current(progress)
        cache.sync(scene)
        image = render_heightmap(scene)
        q_g = cache.qmap("g", lambda: evaluate_q(engine_g, image))
        best_prob = max_grasp_prob(q_g)

        if combined and best_prob >= config.grasp_threshold:
            action = select_action(q_g, config.n_select_max,
                                   seed=(config.seed, _SEED_SAMPLER, i))
            wx, wy = cal.grid_to_world(action.y, action.x, action.angle_index)
            outcome = execute_grasp(scene, float(wx), float(wy), action.a, action.d)
            clock += outcome.sim_duration
            dataset.append(AttemptRecord(
                kind=GRASP, pre_window=action_window(image, action, cal),
                action=action, reward=grasp_reward(outcome), seed=i, timestamp=clock))
            rotation.advance(outcome.new_scene)
            continue

        if not combined:
            state = curriculum_step(state, best_prob)
        q_s = cache.qmap("s", lambda: evaluate_q(engine_s, image))
        lowering = (not combined) and state.mode == "decrease"
        scores = invert_scores(q_s) if lowering else q_s
        if combined:
            strategy = GREEDY
        else:
            strategy = pick_strategy(config.schedule, min(progress, 1.0),
                                     seed=(config.seed, _SEED_STRATEGY, i))
        action = _sample_action(strategy, scores, shift_weights, config,
                                seed=(config.seed, _SEED_SAMPLER, i), cache=cache)
        wx, wy = cal.grid_to_world(action.y, action.x, action.angle_index)
        center = (float(wx), float(wy), action.a)
        if config.oracle_shift_labels:
            before = oracle_window_grasp_prob(scene, center, SHIFT_WINDOW_MM)
        else:
            before = window_grasp_prob(q_g, center, SHIFT_WINDOW_MM)
        outcome = execute_shift(scene, center[0], center[1], action.a, action.d)
        clock += outcome.sim_duration
        post_image = render_heightmap(outcome.new_scene)
        if config.oracle_shift_labels:
            after = oracle_window_grasp_prob(outcome.new_scene, center, SHIFT_WINDOW_MM)
        else:
            cache.sync(outcome.new_scene)
            q_post = cache.qmap("g", lambda: evaluate_q(engine_g, post_image))
            after = window_grasp_prob(q_post, center, SHIFT_WINDOW_MM)
        dataset.append(AttemptRecord(
            kind=SHIFT, pre_window=action_window(image, action, cal),
            action=action, reward=shift_reward(before, after), seed=i,
            timestamp=clock, full_pre=image, full_post=post_image))
        rotation.advance(outcome.new_scene)
    return clock, state


# ---------- optimization ----------

def _load_arrays(dataset: Dataset, kind: str, relabel_prob_fn=None):
    windows, targets, prims = [], [], []
    for rec in dataset.records_of_kind(kind):
        if kind == SHIFT and relabel_prob_fn is not None:
            rec = relabel_shift_record(rec, relabel_prob_fn)
        windows.append(to_net_input(rec.pre_window))
        targets.append(rec.reward)
        prims.append(rec.action.d)
    if not windows:
        return (np.zeros((0, dflt.WINDOW_SIDE, dflt.WINDOW_SIDE), np.float32),
                np.zeros(0, np.float32), np.zeros(0, np.int64))
    return (np.stack(windows).astype(np.float32), np.array(targets, np.float32),
            np.array(prims, np.int64))


def _split_indices(n: int, config: TrainConfig):
    rng = np.random.default_rng((config.seed, _SEED_SPLIT))
    perm = rng.permutation(n)
    n_val = int(round(n * config.val_fraction))
    if n - n_val < 1:
        n_val = 0
    return perm[n_val:], perm[:n_val]


def _mean_loss(weights: WeightStore, windows, targets, prims, loss: str) -> float:
    if len(windows) == 0:
        return float("nan")
    probs = forward_batch(weights, windows)[np.arange(len(windows)), prims]
    probs = np.clip(probs.astype(np.float64), 1e-7, 1.0 - 1e-7)
    t = targets.astype(np.float64)
    if loss == "bce":
        return float(-(t * np.log(probs) + (1 - t) * np.log(1 - probs)).mean())
    return float(((probs - t) ** 2).mean())


def default_loss(kind: str) -> str:
    return "bce" if kind == GRASP else "mse"


def n_primitives_for(kind: str) -> int:
    return dflt.N_GRASP_PRIMITIVES if kind == GRASP else dflt.N_SHIFT_PRIMITIVES


def train_net(dataset: Dataset, kind: str, config: TrainConfig,
              weights: WeightStore | None = None, relabel_prob_fn=None,
              n_steps: int | None = None, out_dir=None,
              optimizer: SgdMomentum | None = None):
    """SGD over the dataset's records of one kind; returns (weights, curve).

    curve rows are (step, train_loss, val_loss) with the validation split
    held out deterministically per config.seed. Shift labels are recomputed
    through relabel_prob_fn when given (so they track the current grasp net).
    """
    windows, targets, prims = _load_arrays(dataset, kind, relabel_prob_fn)
    n = len(windows)
    if n < config.batch_size:
        raise ValueError(f"need at least {config.batch_size} {kind} records, have {n}")
    n_steps = n_steps if n_steps is not None else config.n_steps
    loss = config.loss or default_loss(kind)
    if weights is None:
        weights = init_weights(n_primitives_for(kind), seed=config.seed)
    train_idx, val_idx = _split_indices(n, config)
    opt = optimizer or SgdMomentum(config.learning_rate, config.momentum)
    batch_rng = np.random.default_rng((config.seed, _SEED_BATCH))
    if out_dir and config.checkpoint_every:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    curve = []
    for step in range(n_steps):
        pick = train_idx[batch_rng.integers(0, len(train_idx), config.batch_size)]
        batch = (windows[pick], targets[pick], prims[pick])
        grads, loss_sum = backward(weights, batch, loss=loss,
                                   dropout_seed=(config.seed, _SEED_DROPOUT, step),
                                   update_running=True)
        opt.step(weights, grads, config.batch_size)
        if step % config.eval_every == 0 or step == n_steps - 1:
            val = _mean_loss(weights, windows[val_idx], targets[val_idx],
                             prims[val_idx], loss)
            curve.append((step, loss_sum / config.batch_size, val))
        if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_weights(weights, Path(out_dir) / f"{kind}_step{step + 1:06d}.fcnq")
    return weights, curve


def held_out_accuracy(weights: WeightStore, dataset: Dataset, kind: str,
                      config: TrainConfig, threshold: float = 0.5) -> float:
    """Classification accuracy on the same held-out split train_net used."""
    windows, targets, prims = _load_arrays(dataset, kind)
    _, val_idx = _split_indices(len(windows), config)
    if len(val_idx) == 0:
        return float("nan")
    probs = forward_batch(weights, windows[val_idx])[np.arange(len(val_idx)),
                                                     prims[val_idx]]
    return float(((probs >= threshold) == (targets[val_idx] >= 0.5)).mean())


# ---------- end-to-end pipelines ----------

def train_grasp_pipeline(config: TrainConfig, data_root, rounds: int = 8,
                         bin_spec: BinSpec = DEFAULT_BIN, progress_cb=None):
    """Interleaved collect/train rounds for the grasp net.

    Returns (weights, dataset, curve). Collection in each round uses the
    weights trained so far, so exploration strategies sharpen as data grows.
    """
    dataset = Dataset(Path(data_root))
    weights = init_weights(dflt.N_GRASP_PRIMITIVES, seed=config.seed)
    opt = SgdMomentum(config.learning_rate, config.momentum)
    rotation = _SceneRotation(config, bin_spec, stream=0)
    per_round = math.ceil(config.n_attempts / rounds)
    steps_per_round = math.ceil(config.n_steps / rounds)
    clock = 0.0
    curve = []
    done = 0
    for r in range(rounds):
        n_round = min(per_round, config.n_attempts - done)
        if n_round <= 0:
            break
        clock = run_grasp_collection(config, weights, dataset, n_attempts=n_round,
                                     start_attempt=done, bin_spec=bin_spec,
                                     clock=clock, rotation=rotation)
        done += n_round
        if len(dataset) >= config.batch_size:
            weights, part = train_net(dataset, GRASP, config, weights=weights,
                                      n_steps=steps_per_round, optimizer=opt)
            base = r * steps_per_round
            curve.extend((base + s, tr, vl) for s, tr, vl in part)
        if progress_cb:
            progress_cb(done, config.n_attempts, clock)
    return weights, dataset, curve


def train_shift_pipeline(config: TrainConfig, grasp_weights: WeightStore,
                         data_root, rounds: int = 4,
                         bin_spec: BinSpec = DEFAULT_BIN, progress_cb=None,
                         relabel_prob_fn=None):
    """Interleaved collect/train rounds for the shift net (grasp net fixed).

    relabel_prob_fn recomputes every stored shift label from the record's
    full images before each training round (the net-label path); omit it
    to train on the labels written at collection time.
    """
    dataset = Dataset(Path(data_root))
    weights = init_weights(dflt.N_SHIFT_PRIMITIVES, seed=config.seed + 1)
    opt = SgdMomentum(config.learning_rate, config.momentum)
    rotation = _SceneRotation(config, bin_spec, stream=1)
    state = CurriculumState()
    per_round = math.ceil(config.n_shift_attempts / rounds)
    steps_per_round = math.ceil(config.n_steps / rounds)
    clock = 0.0
    curve = []
    done = 0
    for r in range(rounds):
        n_round = min(per_round, config.n_shift_attempts - done)
        if n_round <= 0:
            break
        clock, state = run_shift_collection(
            config, grasp_weights, weights, dataset, n_attempts=n_round,
            start_attempt=done, bin_spec=bin_spec, clock=clock,
            rotation=rotation, state=state)
        done += n_round
        if dataset.count(SHIFT) >= config.batch_size:
            weights, part = train_net(dataset, SHIFT, config, weights=weights,
                                      n_steps=steps_per_round, optimizer=opt,
                                      relabel_prob_fn=relabel_prob_fn)
            base = r * steps_per_round
            curve.extend((base + s, tr, vl) for s, tr, vl in part)
        if progress_cb:
            progress_cb(done, config.n_shift_attempts, clock)
    return weights, dataset, curve
