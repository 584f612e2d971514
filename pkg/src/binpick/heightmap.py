"""Orthographic depth heightmaps of the bin and their geometry transforms.

A heightmap samples the scene height at pixel centers on a regular grid
(default 109x109 at 4 mm/px, origin at the bin center; column index maps to
world x, row index to world y). Values are mm above the bin floor; a
validity mask marks pixels with usable depth. Network input encodes height
in decimeters-ish units (mm / 100) with invalid pixels set to -1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import defaults as dflt
from .scene import BinSpec, SceneState, object_polygon

HMAP_MAGIC = b"HMAP"
HMAP_VERSION = 1


@dataclass
class DepthImage:
    values: np.ndarray        # (H, W) float32, mm above the floor
    valid: np.ndarray         # (H, W) bool
    resolution_mm: float = dflt.RESOLUTION_MM

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise ValueError("values and valid must be equal-shaped 2-D arrays")
        if self.resolution_mm <= 0:
            raise ValueError("resolution_mm must be > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy(self) -> "DepthImage":
        return DepthImage(self.values.copy(), self.valid.copy(), self.resolution_mm)


def pixel_centers_world(side: int, resolution_mm: float) -> tuple[np.ndarray, np.ndarray]:
    """World (x, y) mm of every pixel center; x varies along columns."""
    half = (side - 1) / 2.0
    coords = (np.arange(side) - half) * resolution_mm
    x, y = np.meshgrid(coords, coords, indexing="xy")
    return x, y


def render_heightmap(scene: SceneState, side: int = dflt.FULL_IMAGE_SIDE,
                     resolution_mm: float = dflt.RESOLUTION_MM) -> DepthImage:
    """Noise-free top-down render: max object height per pixel, walls included."""
    x, y = pixel_centers_world(side, resolution_mm)
    heights = np.zeros((side, side), dtype=np.float64)

    b: BinSpec = scene.bin
    outer_x, outer_y = b.half_x + b.wall_thickness, b.half_y + b.wall_thickness
    on_wall = ((np.abs(x) <= outer_x) & (np.abs(y) <= outer_y)
               & ((np.abs(x) >= b.half_x) | (np.abs(y) >= b.half_y)))
    heights[on_wall] = b.wall_height

    for shape, pose in scene.objects:
        if shape.kind == "cylinder":
            r = shape.extents[0]
            inside = (x - pose.x) ** 2 + (y - pose.y) ** 2 <= r * r
        else:
            sx, sy, _ = shape.extents
            c, s = np.cos(pose.theta), np.sin(pose.theta)
            dx, dy = x - pose.x, y - pose.y
            lx = c * dx + s * dy          # world -> object frame
            ly = -s * dx + c * dy
            inside = (np.abs(lx) <= sx / 2.0) & (np.abs(ly) <= sy / 2.0)
        np.maximum(heights, np.where(inside, shape.height, 0.0), out=heights)

    return DepthImage(heights.astype(np.float32), np.ones((side, side), dtype=bool),
                      resolution_mm)


def apply_sensor_noise(image: DepthImage, rng: np.random.Generator,
                       height_std_mm: float = 1.0, n_invalid_patches: int = 3,
                       patch_side_px: tuple[int, int] = (2, 8)) -> DepthImage:
    """Additive Gaussian height noise plus rectangular invalid dropouts.

    Draws exactly n_invalid_patches non-overlapping axis-aligned rectangles
    and marks them invalid, mimicking stereo shadow holes.
    """
    h, w = image.shape
    values = image.values.astype(np.float64)
    if height_std_mm > 0:
        values = values + rng.normal(0.0, height_std_mm, size=image.shape)
    valid = image.valid.copy()

    placed = 0
    guard = 0
    while placed < n_invalid_patches:
        guard += 1
        if guard > 1000 * max(1, n_invalid_patches):
            raise RuntimeError("could not place non-overlapping invalid patches")
        ph = int(rng.integers(patch_side_px[0], patch_side_px[1] + 1))
        pw = int(rng.integers(patch_side_px[0], patch_side_px[1] + 1))
        r0 = int(rng.integers(0, h - ph + 1))
        c0 = int(rng.integers(0, w - pw + 1))
        region = valid[r0:r0 + ph, c0:c0 + pw]
        if region.all():                 # overlap with a previous patch? retry
            region[:] = False
            placed += 1

    return DepthImage(values.astype(np.float32), valid, image.resolution_mm)


def rotated_crop(image: DepthImage, center_px: tuple[float, float], angle: float,
                 side: int, fill: str | None = None) -> DepthImage:
    """Axis sample of a rotated square window.

    Output pixel (r, c) samples the source at
    ``round(center + R(angle) @ (c - (side-1)/2, r - (side-1)/2))`` with
    nearest-neighbour rounding; ``center_px`` is (col, row) and may be
    fractional. Out-of-bounds samples raise by default; ``fill="invalid"``
    marks them invalid instead (value 0).
    """
    if fill not in (None, "invalid"):
        raise ValueError("fill must be None or 'invalid'")
    h, w = image.shape
    half = (side - 1) / 2.0
    offs = np.arange(side, dtype=np.float64) - half
    dx, dy = np.meshgrid(offs, offs, indexing="xy")      # dx: cols, dy: rows
    c, s = np.cos(angle), np.sin(angle)
    sx = center_px[0] + c * dx - s * dy
    sy = center_px[1] + s * dx + c * dy
    cols = np.rint(sx).astype(np.int64)
    rows = np.rint(sy).astype(np.int64)

    oob = (cols < 0) | (cols >= w) | (rows < 0) | (rows >= h)
    if oob.any():
        if fill is None:
            raise ValueError("rotated_crop window leaves the image bounds")
        cols = np.clip(cols, 0, w - 1)
        rows = np.clip(rows, 0, h - 1)
        values = image.values[rows, cols].copy()
        valid = image.valid[rows, cols].copy()
        values[oob] = 0.0
        valid[oob] = False
    else:
        values = image.values[rows, cols]
        valid = image.valid[rows, cols]
    return DepthImage(values, valid, image.resolution_mm)


def pre_rotate(image: DepthImage, angle: float) -> DepthImage:
    """Full-frame rotation about the image center (same sampling rule as
    rotated_crop); samples falling outside the frame become invalid."""
    h, w = image.shape
    if h != w:
        raise ValueError("pre_rotate expects a square image")
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    return rotated_crop(image, center, angle, w, fill="invalid")


def to_net_input(image: DepthImage,
                 height_scale_mm: float = dflt.HEIGHT_SCALE_MM) -> np.ndarray:
    """Scale heights and overwrite invalid pixels with the sentinel value."""
    out = (image.values / np.float32(height_scale_mm)).astype(np.float32)
    out[~image.valid] = np.float32(dflt.INVALID_DEPTH_SENTINEL)
    return out


# ---------- HMAP container ----------

def hmap_bytes(image: DepthImage) -> bytes:
    h, w = image.shape
    header = HMAP_MAGIC + struct.pack("<IIIf", HMAP_VERSION, w, h, image.resolution_mm)
    payload = image.values.astype("<f4").tobytes(order="C")
    mask = image.valid.astype(np.uint8).tobytes(order="C")
    return header + payload + mask


def hmap_from_bytes(blob: bytes) -> DepthImage:
    if len(blob) < 20:
        raise ValueError("HMAP blob truncated: missing header")
    if blob[:4] != HMAP_MAGIC:
        raise ValueError("not an HMAP blob (bad magic)")
    version, w, h, res = struct.unpack_from("<IIIf", blob, 4)
    if version != HMAP_VERSION:
        raise ValueError(f"unsupported HMAP version {version}")
    need = 20 + w * h * 4 + w * h
    if len(blob) != need:
        raise ValueError(f"HMAP blob has {len(blob)} bytes, expected {need}")
    values = np.frombuffer(blob, dtype="<f4", count=w * h, offset=20).reshape(h, w)
    valid = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=20 + w * h * 4)
    return DepthImage(values.copy(), valid.reshape(h, w).astype(bool), float(res))


def save_hmap(image: DepthImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(hmap_bytes(image))


def load_hmap(path) -> DepthImage:
    with open(path, "rb") as fh:
        return hmap_from_bytes(fh.read())
