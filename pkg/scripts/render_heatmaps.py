#!/usr/bin/env python3
"""Render estimate heatmaps for freshly spawned scenes.

Spawns seeded scenes, runs the nets over their heightmaps, and writes one
PNG per scene and net: the per-cell best estimate blended over the depth
image (shift maps also get direction arrows at the strongest cells).

    python3 scripts/render_heatmaps.py --grasp-weights runs/desk/weights/grasp.fcnq \
        --shift-weights runs/desk/weights/shift.fcnq --out-dir heatmaps/
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from binpick.actions import evaluate_q
from binpick.cli import render_heatmap_image
from binpick.heightmap import render_heightmap
from binpick.network import load_weights
from binpick.scene import spawn_scene


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grasp-weights")
    ap.add_argument("--shift-weights")
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--scenes", type=int, default=3)
    ap.add_argument("--objects", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    nets = [(kind, path) for kind, path in
            (("grasp", args.grasp_weights), ("shift", args.shift_weights))
            if path]
    if not nets:
        ap.error("pass --grasp-weights and/or --shift-weights")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.scenes):
        scene = spawn_scene(args.objects, seed=args.seed + i)
        image = render_heightmap(scene)
        for kind, path in nets:
            qmap = evaluate_q(load_weights(path), image)
            png = out_dir / f"scene{i:02d}_{kind}.png"
            render_heatmap_image(image, qmap, kind).save(png)
            print(f"wrote {png} (best {qmap.values.max():.3f})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
