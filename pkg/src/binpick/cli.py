"""Command-line entry points.

Commands: train-grasp, train-shift, eval, sweep, heatmap, dataset-stats.
Global flags (--config, --seed, --jobs, --dry-run) come before the command.
Every command validates its configuration and declares its outputs before
writing anything; --dry-run stops after that declaration. Exit codes:
0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from . import defaults as dflt
from .actions import evaluate_q
from .config import ConfigError, RunConfig, load_config
from .controller import run_episodes, threshold_sweep
from .heightmap import DepthImage, render_heightmap
from .network import InferenceEngine, init_weights, load_weights, save_weights
from .rewards import SHIFT_WINDOW_MM, Dataset
from .scene import load_scene, shift_direction
from .training import train_grasp_pipeline, train_shift_pipeline


def _say(message: str) -> None:
    print(message)


def _fail_config(message: str):
    raise ConfigError(message)


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        _fail_config(f"{what} does not exist: {path}")


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        _fail_config(f"{what} not found: {path}")


def _require_fresh_dataset(path: Path) -> None:
    manifest = path / "manifest.jsonl"
    if manifest.is_file() and manifest.stat().st_size > 0:
        _fail_config(f"dataset directory already has records: {path} "
                     "(point data_dir at a fresh directory)")


def _declare_outputs(paths, dry_run: bool) -> bool:
    for p in paths:
        _say(f"will write: {p}")
    if dry_run:
        _say("dry run: stopping before any output is written")
    return dry_run


def _write_loss_csv(curve, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_loss"])
        for step, train_loss, val_loss in curve:
            writer.writerow([step, repr(float(train_loss)), repr(float(val_loss))])


# ---------- train commands ----------

def _cmd_train_grasp(args, cfg: RunConfig) -> int:
    train = _override_train(cfg, args)
    data_dir = cfg.data_dir / "grasp"
    weights_path = cfg.weights_dir / "grasp.fcnq"
    loss_path = cfg.weights_dir / "grasp_loss.csv"
    _require_dir(cfg.weights_dir, "output dir")
    _require_dir(cfg.data_dir.parent, "data dir parent")
    _require_fresh_dataset(data_dir)
    if _declare_outputs([data_dir, weights_path, loss_path], args.dry_run):
        return 0
    weights, dataset, curve = train_grasp_pipeline(
        train, data_dir, rounds=args.rounds, bin_spec=cfg.bin_spec,
        progress_cb=lambda done, total, clock: _say(
            f"collected {done}/{total} attempts ({clock:.0f} simulated s)"))
    save_weights(weights, weights_path)
    _write_loss_csv(curve, loss_path)
    _say(f"dataset: {len(dataset)} records at {data_dir}")
    _say(f"weights: {weights_path}")
    return 0


def _cmd_train_shift(args, cfg: RunConfig) -> int:
    train = _override_train(cfg, args)
    data_dir = cfg.data_dir / "shift"
    weights_path = cfg.weights_dir / "shift.fcnq"
    loss_path = cfg.weights_dir / "shift_loss.csv"
    _require_dir(cfg.weights_dir, "output dir")
    _require_dir(cfg.data_dir.parent, "data dir parent")
    _require_fresh_dataset(data_dir)

    if args.grasp_weights is not None:
        _require_file(Path(args.grasp_weights), "grasp weights")
        grasp_weights = load_weights(args.grasp_weights)
        train = dataclasses.replace(train, oracle_shift_labels=args.oracle_labels)
    elif args.oracle_labels:
        # curriculum decisions fall back to an untrained grasp net; labels
        # come from the simulator itself
        grasp_weights = init_weights(dflt.N_GRASP_PRIMITIVES, seed=cfg.seed)
        train = dataclasses.replace(train, oracle_shift_labels=True)
    else:
        _fail_config("train-shift needs --grasp-weights PATH or --oracle-labels")

    if _declare_outputs([data_dir, weights_path, loss_path], args.dry_run):
        return 0

    relabel_fn = None
    if not train.oracle_shift_labels:
        engine = InferenceEngine(grasp_weights)
        from .actions import window_grasp_prob

        def relabel_fn(image, center, window_mm):
            return window_grasp_prob(evaluate_q(engine, image), center, window_mm)

    weights, dataset, curve = train_shift_pipeline(
        train, grasp_weights, data_dir, rounds=args.rounds,
        bin_spec=cfg.bin_spec, relabel_prob_fn=relabel_fn,
        progress_cb=lambda done, total, clock: _say(
            f"collected {done}/{total} attempts ({clock:.0f} simulated s)"))
    save_weights(weights, weights_path)
    _write_loss_csv(curve, loss_path)
    _say(f"dataset: {len(dataset)} records at {data_dir}")
    _say(f"weights: {weights_path}")
    return 0


def _override_train(cfg: RunConfig, args):
    train = dataclasses.replace(cfg.train, seed=cfg.seed)
    if getattr(args, "attempts", None) is not None:
        key = "n_attempts" if args.command == "train-grasp" else "n_shift_attempts"
        train = dataclasses.replace(train, **{key: args.attempts})
    if getattr(args, "steps", None) is not None:
        train = dataclasses.replace(train, n_steps=args.steps)
    return train


# ---------- evaluation commands ----------

_EVAL_FIELDS = ["trial", "grasp_attempts", "grasp_successes", "shift_count",
                "elapsed_s", "objects_remaining", "outcome", "grasp_rate",
                "shifts_per_grasp", "sim_pph"]


def _cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    traces_dir = Path(args.traces_dir) if args.traces_dir else out.parent / (out.stem + "_traces")
    _require_dir(out.parent, "output dir")
    grasp_path, shift_path = _weights_paths(args, cfg)
    if _declare_outputs([out, traces_dir], args.dry_run):
        return 0
    traces_dir.mkdir(parents=True, exist_ok=True)
    episodes = run_episodes(load_weights(grasp_path), load_weights(shift_path),
                            n_episodes=args.trials, n_objects=args.objects,
                            config=cfg.controller, seed=cfg.seed,
                            bin_spec=cfg.bin_spec, jobs=cfg.jobs,
                            traces_dir=traces_dir)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_EVAL_FIELDS)
        writer.writeheader()
        for i, m in enumerate(episodes):
            writer.writerow({
                "trial": i, "grasp_attempts": m.grasp_attempts,
                "grasp_successes": m.grasp_successes,
                "shift_count": m.shift_count, "elapsed_s": m.elapsed_s,
                "objects_remaining": m.objects_remaining, "outcome": m.outcome,
                "grasp_rate": m.grasp_rate,
                "shifts_per_grasp": m.shifts_per_grasp,
                "sim_pph": m.picks_per_hour})
    for name, values in (
            ("grasp_rate", [m.grasp_rate for m in episodes]),
            ("shifts_per_grasp", [m.shifts_per_grasp for m in episodes]),
            ("sim_pph", [m.picks_per_hour for m in episodes])):
        _say(f"{name}: {_mean_se(values)}")
    _say(f"metrics: {out}")
    return 0


def _mean_se(values) -> str:
    arr = np.asarray(values, float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return "n/a (no finite samples)"
    mean = arr.mean()
    se = arr.std(ddof=1) / math.sqrt(arr.size) if arr.size > 1 else float("nan")
    return f"{mean:.3f} +/- {se:.3f} (n={arr.size})"


def _cmd_sweep(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _require_dir(out.parent, "output dir")
    grasp_path, shift_path = _weights_paths(args, cfg)
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    if _declare_outputs([out], args.dry_run):
        return 0
    rows = threshold_sweep(load_weights(grasp_path), load_weights(shift_path),
                           thresholds=thresholds, n_episodes=args.episodes,
                           n_objects=args.objects, config=cfg.controller,
                           seed=cfg.seed, bin_spec=cfg.bin_spec,
                           csv_path=out, jobs=cfg.jobs)
    for row in rows:
        _say(f"threshold {row['grasp_threshold']:.2f}: "
             f"grasp_rate={row['grasp_rate']:.3f} "
             f"shifts_per_grasp={row['shifts_per_grasp']:.3f} "
             f"sim_pph={row['sim_pph']:.1f}")
    _say(f"sweep: {out}")
    return 0


def _weights_paths(args, cfg: RunConfig) -> tuple[Path, Path]:
    grasp = Path(args.grasp_weights) if args.grasp_weights else cfg.weights_dir / "grasp.fcnq"
    shift = Path(args.shift_weights) if args.shift_weights else cfg.weights_dir / "shift.fcnq"
    _require_file(grasp, "grasp weights")
    _require_file(shift, "shift weights")
    return grasp, shift


# ---------- heatmap ----------

def _heat_color(t: float) -> tuple[int, int, int]:
    """Blue (low) to red (high) through purple."""
    t = min(max(t, 0.0), 1.0)
    return (round(255 * t), 0, round(255 * (1.0 - t)))


def render_heatmap_image(image: DepthImage, qmap, kind: str):
    """Color the per-cell best estimate over the heightmap; shift maps span
    estimate 0.5..1.0 and get direction arrows at the 10 best cells."""
    from PIL import Image, ImageDraw

    cell_best = qmap.values.max(axis=(2, 3))                  # (G, G)
    lo, hi = (0.5, 1.0) if kind == "shift" else (0.0, 1.0)
    norm = (cell_best - lo) / (hi - lo)
    grid = np.array([[_heat_color(v) for v in row] for row in norm], np.uint8)
    side = image.shape[0]
    heat = Image.fromarray(grid, "RGB").resize((side, side), Image.NEAREST)

    height = image.values
    span = float(height.max()) or 1.0
    gray = np.clip(height / span * 255.0, 0, 255).astype(np.uint8)
    base = Image.fromarray(np.stack([gray] * 3, axis=-1), "RGB")
    out = Image.blend(base, heat, 0.5)

    if kind == "shift":
        draw = ImageDraw.Draw(out)
        flat_valid = qmap.valid.any(axis=2).ravel()
        order = np.argsort(-cell_best.ravel(), kind="stable")
        order = [i for i in order if flat_valid[i]][:10]
        for flat in order:
            row, col = divmod(int(flat), cell_best.shape[1])
            k, d = np.unravel_index(int(np.argmax(qmap.values[row, col])),
                                    qmap.values.shape[2:])
            direction = shift_direction(k * math.pi / (qmap.values.shape[2]), int(d))
            cx = 2 * col + dflt.WINDOW_HALF
            cy = 2 * row + dflt.WINDOW_HALF
            dx, dy = direction * 10.0
            draw.line([(cx, cy), (cx + dx, cy + dy)], fill=(255, 255, 0), width=1)
            draw.ellipse([cx + dx - 1, cy + dy - 1, cx + dx + 1, cy + dy + 1],
                         fill=(255, 255, 0))
    return out


def _cmd_heatmap(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _require_dir(out.parent, "output dir")
    _require_file(Path(args.scene), "scene file")
    _require_file(Path(args.weights), "weights file")
    if args.kind not in ("grasp", "shift"):
        _fail_config(f"unknown net kind {args.kind!r} (grasp or shift)")
    if _declare_outputs([out], args.dry_run):
        return 0
    scene = load_scene(args.scene)
    weights = load_weights(args.weights)
    image = render_heightmap(scene)
    qmap = evaluate_q(weights, image, jobs=cfg.jobs)
    render_heatmap_image(image, qmap, args.kind).save(out, "PNG")
    _say(f"heatmap: {out}")
    return 0


# ---------- dataset stats ----------

def _cmd_dataset_stats(args, cfg: RunConfig) -> int:
    root = Path(args.dataset)
    if not (root / "manifest.jsonl").is_file():
        _fail_config(f"no dataset manifest under: {root}")
    ds = Dataset(root, create=False)
    stats = ds.stats()
    _say(f"dataset: {root} ({len(ds)} records)")
    for kind, block in stats.items():
        line = (f"  {kind}: count={block['count']} "
                f"reward_mean={block['reward_mean']:.3f} "
                f"reward_std={block['reward_std']:.3f}")
        if "success_rate" in block:
            line += f" success_rate={block['success_rate']:.3f}"
        _say(line)
    return 0


# ---------- parser / entry point ----------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="binpick",
        description="Self-supervised grasp/shift learning for planar bin picking")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--jobs", type=int, help="override worker count")
    parser.add_argument("--dry-run", action="store_true",
                        help="validate and list outputs, write nothing")
    sub = parser.add_subparsers(dest="command", required=True)

    tg = sub.add_parser("train-grasp", help="collect grasp attempts and train the grasp net")
    tg.add_argument("--attempts", type=int, help="override the attempt budget")
    tg.add_argument("--steps", type=int, help="override optimizer steps")
    tg.add_argument("--rounds", type=int, default=8, help="collect/train rounds")
    tg.set_defaults(handler=_cmd_train_grasp)

    ts = sub.add_parser("train-shift", help="collect shift attempts and train the shift net")
    ts.add_argument("--attempts", type=int, help="override the attempt budget")
    ts.add_argument("--steps", type=int, help="override optimizer steps")
    ts.add_argument("--rounds", type=int, default=4, help="collect/train rounds")
    ts.add_argument("--grasp-weights", help="trained grasp net for labels and decisions")
    ts.add_argument("--oracle-labels", action="store_true",
                    help="label shifts from the simulator oracle")
    ts.set_defaults(handler=_cmd_train_shift)

    ev = sub.add_parser("eval", help="run seeded controller episodes")
    ev.add_argument("--out", required=True, help="metrics CSV path")
    ev.add_argument("--trials", type=int, default=10)
    ev.add_argument("--objects", type=int, default=10)
    ev.add_argument("--grasp-weights")
    ev.add_argument("--shift-weights")
    ev.add_argument("--traces-dir", help="where to put per-episode traces")
    ev.set_defaults(handler=_cmd_eval)

    sw = sub.add_parser("sweep", help="sweep the grasp threshold")
    sw.add_argument("--out", required=True, help="sweep CSV path")
    sw.add_argument("--thresholds", default="0.2,0.4,0.6,0.75,0.9")
    sw.add_argument("--episodes", type=int, default=20, help="episodes per point")
    sw.add_argument("--objects", type=int, default=5)
    sw.add_argument("--grasp-weights")
    sw.add_argument("--shift-weights")
    sw.set_defaults(handler=_cmd_sweep)

    hm = sub.add_parser("heatmap", help="render an estimate heatmap over a scene")
    hm.add_argument("--scene", required=True, help="scene JSON file")
    hm.add_argument("--weights", required=True, help="FCNQ weights file")
    hm.add_argument("--kind", required=True, help="grasp or shift")
    hm.add_argument("--out", required=True, help="PNG path")
    hm.set_defaults(handler=_cmd_heatmap)

    st = sub.add_parser("dataset-stats", help="summarize a collected dataset")
    st.add_argument("dataset", help="dataset directory")
    st.set_defaults(handler=_cmd_dataset_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.jobs is not None:
            cfg = dataclasses.replace(cfg, jobs=args.jobs)
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=cfg.seed))
        return args.handler(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
