"""Action grid layout: mapping between net output cells and world poses.

The dense network maps a 109x109 heightmap to a 40x40 output grid with a
stride of 2 px. Output cell (i, j) corresponds to the 31x31 input window
with top-left (2i, 2j), i.e. window center (2j + 15, 2i + 15) in (col, row)
pixels. Rotation k evaluates the counter-rotated image, so the cell's world
pose is the window center mapped back through the rotation about the image
center. Each rotation therefore carries its own grid of world positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import defaults as dflt
from .scene import DEFAULT_BIN, DEFAULT_GRIPPER, BinSpec, GripperSpec


def rotation_angles(n_angles: int = dflt.N_ANGLES) -> np.ndarray:
    """Evenly spaced gripper angles over the half-turn (pi-symmetric jaws)."""
    return np.arange(n_angles) * (np.pi / n_angles)


@dataclass(frozen=True)
class GridLayout:
    """World poses and in-bin validity for every output cell and rotation."""
    angles: np.ndarray            # (K,) rad
    world_positions: np.ndarray   # (G, G, K, 2) mm, world frame
    valid_mask: np.ndarray        # (G, G, K) bool: pose safely inside the bin
    resolution_mm: float

    @property
    def grid_side(self) -> int:
        return self.world_positions.shape[0]

    @property
    def n_angles(self) -> int:
        return len(self.angles)


def pixel_to_world(col, row, resolution_mm: float = dflt.RESOLUTION_MM,
                   image_side: int = dflt.FULL_IMAGE_SIDE):
    """Pixel center -> world mm. col maps to x, row to y; origin at image center."""
    half = (image_side - 1) / 2.0
    return (np.asarray(col, dtype=np.float64) - half) * resolution_mm, \
           (np.asarray(row, dtype=np.float64) - half) * resolution_mm


def world_to_pixel(x, y, resolution_mm: float = dflt.RESOLUTION_MM,
                   image_side: int = dflt.FULL_IMAGE_SIDE):
    """World mm -> float pixel (col, row)."""
    half = (image_side - 1) / 2.0
    return np.asarray(x, dtype=np.float64) / resolution_mm + half, \
           np.asarray(y, dtype=np.float64) / resolution_mm + half


def build_layout(bin_spec: BinSpec = DEFAULT_BIN,
                 gripper: GripperSpec = DEFAULT_GRIPPER,
                 n_angles: int = dflt.N_ANGLES,
                 grid_side: int = dflt.GRID_SIDE,
                 resolution_mm: float = dflt.RESOLUTION_MM,
                 image_side: int = dflt.FULL_IMAGE_SIDE) -> GridLayout:
    angles = rotation_angles(n_angles)
    half = (image_side - 1) / 2.0
    center = np.array([half, half])

    idx = np.arange(grid_side)
    win_col = (dflt.GRID_STRIDE_PX * idx + dflt.WINDOW_HALF).astype(np.float64)
    # cell (i, j) of rotation k: window center (col=2j+15, row=2i+15) in the
    # counter-rotated image; map back through the rotation about the center
    cols, rows = np.meshgrid(win_col, win_col, indexing="xy")
    pix = np.stack([cols, rows], axis=-1) - center          # (G, G, 2), [col, row]

    positions = np.empty((grid_side, grid_side, n_angles, 2))
    for k, theta in enumerate(angles):
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        back = pix @ rot.T + center
        x, y = pixel_to_world(back[..., 0], back[..., 1], resolution_mm, image_side)
        positions[:, :, k, 0] = x
        positions[:, :, k, 1] = y

    # a pose closer than half the jaw length to a wall collides at every angle
    margin = gripper.jaw_footprint[0] / 2.0
    valid = ((np.abs(positions[..., 0]) <= bin_spec.half_x - margin)
             & (np.abs(positions[..., 1]) <= bin_spec.half_y - margin))
    return GridLayout(angles, positions, valid, resolution_mm)


_layout_cache: dict[tuple, GridLayout] = {}


def default_layout(bin_spec: BinSpec = DEFAULT_BIN,
                   gripper: GripperSpec = DEFAULT_GRIPPER) -> GridLayout:
    key = (bin_spec.inner_length, bin_spec.inner_width, gripper.jaw_footprint[0])
    if key not in _layout_cache:
        _layout_cache[key] = build_layout(bin_spec, gripper)
    return _layout_cache[key]
