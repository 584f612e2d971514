"""Shared layout constants tying the image grid to the network stride chain.

The dense network consumes a square heightmap and emits a stride-2 grid of
window evaluations, so image geometry and network geometry must agree. All
constants below are derived from the conv chain (5/2, 5, 5, 6, 1, 1, valid):
a 31 px window reduces to 1x1 and a 109 px image reduces to 40x40.
"""

from __future__ import annotations

RESOLUTION_MM: float = 4.0       # heightmap resolution, mm per pixel
FULL_IMAGE_SIDE: int = 109       # dense input side, px
WINDOW_SIDE: int = 31            # training window side, px
GRID_SIDE: int = 40              # dense output side (per rotation)
GRID_STRIDE_PX: int = 2          # image pixels between adjacent grid cells
WINDOW_HALF: int = WINDOW_SIDE // 2   # 15, window centre offset from top-left

N_ANGLES: int = 20               # rotation discretization over [0, pi)
N_GRASP_PRIMITIVES: int = 3      # pre-shaped gripper widths
N_SHIFT_PRIMITIVES: int = 2      # push along gripper +x or +y

# Heights below this sentinel mark missing depth when fed to the network.
INVALID_DEPTH_SENTINEL: float = -1.0
# Heightmap values are divided by this before entering the network so that
# typical scenes land in [0, ~0.6] while the sentinel stays at -1.
HEIGHT_SCALE_MM: float = 100.0

# Per-primitive height offsets for pose extraction (mm, added to the depth
# value at the action pixel): grasps descend 10 mm below the object top,
# shifts run 5 mm above the floor.
GRASP_HEIGHT_OFFSET_MM: float = -10.0
SHIFT_HEIGHT_OFFSET_MM: float = 5.0
