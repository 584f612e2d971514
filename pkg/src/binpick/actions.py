"""Dense action evaluation and selection over the discrete pose grid.

An action is (x, y, a, d): grid column, grid row, one of 20 discrete gripper
angles, and a motion-primitive index. Dense evaluation runs the network on 20
counter-rotated copies of the heightmap and stacks the results into a
40x40x20x|M| value map whose cells carry their mapped-back world poses, so a
cell is exactly the window forward pass at that world pose.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import defaults as dflt
from . import grid
from .heightmap import DepthImage, pre_rotate, to_net_input
from .network import InferenceEngine, WeightStore

QMAP_MAGIC = b"QMAP"
QMAP_VERSION = 1
_TOL = 1e-9


@dataclass(frozen=True)
class Action:
    x: int          # grid column index
    y: int          # grid row index
    a: float        # gripper angle, one of the discrete rotations [rad]
    d: int          # motion-primitive index

    @property
    def angle_index(self) -> int:
        k = int(round(self.a / (np.pi / dflt.N_ANGLES)))
        return k % dflt.N_ANGLES


@dataclass(frozen=True)
class Calibration:
    """Affine grid-to-world mapping plus the discrete rotation set.

    origin_mm is the world position of grid cell (0, 0) at rotation 0;
    rotation k maps the unrotated grid position through R(angle_k) about the
    image center (the world origin).
    """
    origin_mm: tuple[float, float]
    resolution_mm: float
    stride_px: int
    angles: tuple[float, ...]

    def grid_to_world(self, row, col, angle_index: int):
        x0 = self.origin_mm[0] + self.stride_px * self.resolution_mm * np.asarray(col, dtype=np.float64)
        y0 = self.origin_mm[1] + self.stride_px * self.resolution_mm * np.asarray(row, dtype=np.float64)
        th = self.angles[angle_index]
        c, s = np.cos(th), np.sin(th)
        return c * x0 - s * y0, s * x0 + c * y0

    def world_to_grid(self, x, y, angle_index: int):
        th = self.angles[angle_index]
        c, s = np.cos(th), np.sin(th)
        x0 = c * np.asarray(x, dtype=np.float64) + s * np.asarray(y, dtype=np.float64)
        y0 = -s * np.asarray(x, dtype=np.float64) + c * np.asarray(y, dtype=np.float64)
        col = (x0 - self.origin_mm[0]) / (self.stride_px * self.resolution_mm)
        row = (y0 - self.origin_mm[1]) / (self.stride_px * self.resolution_mm)
        return row, col


def default_calibration(layout=None) -> Calibration:
    layout = layout or grid.default_layout()
    origin = layout.world_positions[0, 0, 0]
    return Calibration((float(origin[0]), float(origin[1])),
                       layout.resolution_mm, dflt.GRID_STRIDE_PX,
                       tuple(float(a) for a in layout.angles))


@dataclass
class QMap:
    """Reward estimates over the full action grid of one observation."""
    values: np.ndarray             # (G, G, K, |M|) float32 in [0, 1]
    valid: np.ndarray              # (G, G, K) bool: pose inside the bin interior
    world_positions: np.ndarray    # (G, G, K, 2) mm
    calibration: Calibration
    pre_rotated: np.ndarray | None = None   # (K, 109, 109) net inputs, for reuse

    @property
    def n_primitives(self) -> int:
        return self.values.shape[-1]

    @property
    def n_angles(self) -> int:
        return self.values.shape[2]


def evaluate_q(weights, image: DepthImage, jobs: int = 1, layout=None) -> QMap:
    """Dense network evaluation over all rotations: the policy's value map.

    QMap[i, j, k, d] is the dense output at cell (i, j) of the image
    counter-rotated by angle k; its world pose is the cell's window center
    mapped back through that rotation. jobs > 1 evaluates rotation chunks on
    a thread pool (BLAS releases the GIL).
    """
    if image.shape != (dflt.FULL_IMAGE_SIDE, dflt.FULL_IMAGE_SIDE):
        raise ValueError(f"image must be {dflt.FULL_IMAGE_SIDE} px square, got {image.shape}")
    engine = weights if isinstance(weights, InferenceEngine) else InferenceEngine(weights)
    layout = layout or grid.default_layout()
    nets = np.stack([to_net_input(pre_rotate(image, float(th)))
                     for th in layout.angles])
    if jobs <= 1:
        dense = engine.dense_many(nets)
    else:
        n = len(nets)
        size = max(1, -(-n // jobs))
        chunks = [nets[i:i + size] for i in range(0, n, size)]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda c: engine.dense_many(c, chunk=len(c)), chunks))
        dense = np.concatenate(parts, axis=0)
    values = np.ascontiguousarray(dense.transpose(1, 2, 0, 3), dtype=np.float32)
    return QMap(values, layout.valid_mask, layout.world_positions,
                default_calibration(layout), nets)


def select_action(q: QMap, n_max: int = 1, seed: int = 0) -> Action:
    """Uniform draw among the n_max largest valid entries.

    Ties are broken by lexicographic (row, col, angle, primitive) index
    before truncation; the draw is deterministic per seed.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    masked = np.where(q.valid[..., None], q.values, -1.0)
    flat = masked.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    top = order[:min(n_max, flat.size)]
    pick = int(top[np.random.default_rng(seed).integers(len(top))])
    i, j, k, d = np.unravel_index(pick, q.values.shape)
    return Action(x=int(j), y=int(i), a=float(q.calibration.angles[k]), d=int(d))


def max_estimate(q: QMap) -> float:
    """Global maximum over the bin-interior cells (0 when nothing is valid)."""
    if not q.valid.any():
        return 0.0
    return float(q.values[q.valid].max())


def max_grasp_prob(q: QMap) -> float:
    """max_estimate read as a probability when q is a grasp map."""
    return max_estimate(q)


def window_grasp_prob(q: QMap, center: tuple[float, float, float],
                      window_side: float) -> float:
    """Maximum over cells whose world position lies in a square window
    aligned to the gripper frame at the center angle."""
    if window_side <= 0:
        raise ValueError("window_side must be > 0")
    cx, cy, angle = center
    c, s = np.cos(-angle), np.sin(-angle)
    rel = q.world_positions - np.array([cx, cy])
    lx = c * rel[..., 0] - s * rel[..., 1]
    ly = s * rel[..., 0] + c * rel[..., 1]
    half = window_side / 2.0
    inside = (np.abs(lx) <= half + _TOL) & (np.abs(ly) <= half + _TOL) & q.valid
    if not inside.any():
        raise ValueError("window contains no valid grid cells")
    return float(q.values[inside].max())


_NEIGHBOR_OFFSETS = sorted(
    ((dr, dc) for dr in range(-3, 4) for dc in range(-3, 4)),
    key=lambda rc: (rc[0] * rc[0] + rc[1] * rc[1], rc[0], rc[1]))


def image_to_world(action: Action, image: DepthImage, cal: Calibration,
                   height_offsets=None) -> tuple[float, float, float, float, float, float]:
    """Grid action -> world pose (x, y, z, a, b, c); b = c = 0.

    z is the depth value under the action plus the primitive's height
    offset; invalid depth falls back to the nearest valid pixel within 3 px.
    """
    wx, wy = cal.grid_to_world(action.y, action.x, action.angle_index)
    wx, wy = float(wx), float(wy)
    h, w = image.shape
    col = int(np.rint(wx / image.resolution_mm + (w - 1) / 2.0))
    row = int(np.rint(wy / image.resolution_mm + (h - 1) / 2.0))
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError("action pose falls outside the image")
    depth = None
    for dr, dc in _NEIGHBOR_OFFSETS:
        r, c = row + dr, col + dc
        if 0 <= r < h and 0 <= c < w and image.valid[r, c]:
            depth = float(image.values[r, c])
            break
    if depth is None:
        raise ValueError("no valid depth within 3 px of the action")
    if height_offsets is None:
        offset = dflt.GRASP_HEIGHT_OFFSET_MM
    else:
        offset = float(np.asarray(height_offsets)[action.d])
    return (wx, wy, depth + offset, action.a, 0.0, 0.0)


def action_window(image: DepthImage, action: Action, cal: Calibration | None = None) -> DepthImage:
    """The 31x31 rotated crop the dense evaluation saw at this action's cell.

    Samples the original image at the mapped-back float center, which is
    bit-identical to cropping the counter-rotated image at the grid cell.
    """
    from .heightmap import rotated_crop
    cal = cal or default_calibration()
    wx, wy = cal.grid_to_world(action.y, action.x, action.angle_index)
    half = (image.shape[1] - 1) / 2.0, (image.shape[0] - 1) / 2.0
    center = (float(wx) / image.resolution_mm + half[0],
              float(wy) / image.resolution_mm + half[1])
    theta = cal.angles[action.angle_index]
    return rotated_crop(image, center, float(theta), dflt.WINDOW_SIDE, fill="invalid")


# ---------- debug container ----------

def save_qmap(q: QMap, path) -> None:
    """HMAP-style debug dump: header plus f32 values and u8 validity."""
    g1, g2, k, m = q.values.shape
    header = QMAP_MAGIC + struct.pack("<IIIIIf", QMAP_VERSION, g2, g1, k * m, k,
                                      q.calibration.resolution_mm)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(q.values, dtype="<f4").tobytes())
        fh.write(q.valid.astype(np.uint8).tobytes())


def load_qmap(path):
    """Returns (values (G,G,K,M), valid (G,G,K), resolution_mm)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 28 or blob[:4] != QMAP_MAGIC:
        raise ValueError("not a QMAP blob (bad magic)")
    version, w, h, channels, k, res = struct.unpack_from("<IIIIIf", blob, 4)
    if version != QMAP_VERSION:
        raise ValueError(f"unsupported QMAP version {version}")
    if channels % k:
        raise ValueError("channel count not divisible by angle count")
    m = channels // k
    need = 28 + h * w * channels * 4 + h * w * k
    if len(blob) != need:
        raise ValueError(f"QMAP blob has {len(blob)} bytes, expected {need}")
    values = np.frombuffer(blob, dtype="<f4", count=h * w * channels,
                           offset=28).reshape(h, w, k, m).copy()
    valid = np.frombuffer(blob, dtype=np.uint8, count=h * w * k,
                          offset=28 + h * w * channels * 4)
    return values, valid.reshape(h, w, k).astype(bool), float(res)
