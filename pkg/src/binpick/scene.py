"""Deterministic 2-D planar bin world.

Objects are convex footprints (boxes, cylinders) resting on the bin floor.
Two motion primitives act on the world: a parallel-jaw grasp (three
pre-shaped widths) and a straight 30 mm push with the closed gripper.
Pushing is quasi-static and translation-only: pushed objects move along the
push direction by the minimal translation that resolves penetration,
cascading into further objects and clamping at the bin walls.

All lengths are mm, angles rad. Evolution is bit-deterministic for a fixed
(scene, action) pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from . import geometry as geo

MIN_CONTACT_WIDTH_MM = 5.0     # thinner objects slip out of the jaws
DESCEND_BELOW_TOP_MM = 10.0    # jaws descend this far below the target top
_TOL = 1e-9


class ScenePlacementError(RuntimeError):
    """Raised when spawn_scene cannot place the requested objects."""


@dataclass(frozen=True)
class BinSpec:
    inner_length: float = 280.0   # x extent of the interior
    inner_width: float = 180.0    # y extent of the interior
    wall_height: float = 50.0
    wall_thickness: float = 10.0

    def __post_init__(self) -> None:
        for name in ("inner_length", "inner_width", "wall_height", "wall_thickness"):
            if getattr(self, name) <= 0:
                raise ValueError(f"BinSpec.{name} must be > 0")

    @property
    def half_x(self) -> float:
        return self.inner_length / 2.0

    @property
    def half_y(self) -> float:
        return self.inner_width / 2.0

    def wall_polygons(self) -> list[np.ndarray]:
        """Four wall slabs (frame between inner and outer rectangle), CCW."""
        hx, hy, t = self.half_x, self.half_y, self.wall_thickness
        return [
            geo.rect_polygon(-(hx + t / 2), 0.0, t / 2, hy + t, 0.0),
            geo.rect_polygon(hx + t / 2, 0.0, t / 2, hy + t, 0.0),
            geo.rect_polygon(0.0, -(hy + t / 2), hx + t, t / 2, 0.0),
            geo.rect_polygon(0.0, hy + t / 2, hx + t, t / 2, 0.0),
        ]


@dataclass(frozen=True)
class ObjectShape:
    kind: str                      # "box" | "cylinder"
    extents: tuple[float, ...]     # box: (side_x, side_y, height); cylinder: (radius, height)

    def __post_init__(self) -> None:
        if self.kind not in ("box", "cylinder"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.kind == "box" and len(self.extents) != 3:
            raise ValueError("box extents must be (side_x, side_y, height)")
        if self.kind == "cylinder" and len(self.extents) != 2:
            raise ValueError("cylinder extents must be (radius, height)")
        if any(e <= 0 for e in self.extents):
            raise ValueError("extents must be > 0")

    @property
    def height(self) -> float:
        return self.extents[-1]

    @property
    def circumradius(self) -> float:
        if self.kind == "box":
            sx, sy, _ = self.extents
            return float(np.hypot(sx, sy)) / 2.0
        return self.extents[0]


@dataclass(frozen=True)
class ScenePose:
    x: float
    y: float
    theta: float = 0.0


@dataclass
class SceneState:
    bin: BinSpec
    objects: list[tuple[ObjectShape, ScenePose]]
    rng_seed: int = 0

    def copy(self) -> "SceneState":
        return SceneState(self.bin, list(self.objects), self.rng_seed)


@dataclass(frozen=True)
class GripperSpec:
    # jaw footprint: (length perpendicular to closing, thickness along closing)
    jaw_footprint: tuple[float, float] = (20.0, 10.0)
    preshaped_widths: tuple[float, float, float] = (30.0, 55.0, 80.0)
    max_stroke: float = 80.0
    shift_distance: float = 30.0

    def __post_init__(self) -> None:
        if len(self.preshaped_widths) != 3:
            raise ValueError("exactly three pre-shaped widths required")
        if self.shift_distance <= 0:
            raise ValueError("shift_distance must be > 0")


@dataclass(frozen=True)
class TimeModel:
    """Simulated primitive durations used for throughput accounting."""
    grasp_success_s: float = 11.1
    grasp_fail_s: float = 8.0
    shift_s: float = 10.0


@dataclass(frozen=True)
class PrimitiveOutcome:
    success: bool                     # grasp success; always False for shifts
    new_scene: SceneState
    grasped_object: int | None
    sim_duration: float


DEFAULT_BIN = BinSpec()
DEFAULT_GRIPPER = GripperSpec()
DEFAULT_TIME_MODEL = TimeModel()
DEFAULT_SHAPE_POOL = (
    ObjectShape("box", (30.0, 30.0, 30.0)),
    ObjectShape("cylinder", (15.0, 30.0)),
)


# ---------- footprints ----------

def object_polygon(shape: ObjectShape, pose: ScenePose, circle_segments: int = 64) -> np.ndarray:
    if shape.kind == "box":
        sx, sy, _ = shape.extents
        return geo.rect_polygon(pose.x, pose.y, sx / 2, sy / 2, pose.theta)
    return geo.regular_polygon(pose.x, pose.y, shape.extents[0], circle_segments)


def footprints_overlap(a: tuple[ObjectShape, ScenePose], b: tuple[ObjectShape, ScenePose]) -> bool:
    sa, pa = a
    sb, pb = b
    if sa.kind == "cylinder" and sb.kind == "cylinder":
        return geo.circles_overlap((pa.x, pa.y), sa.extents[0], (pb.x, pb.y), sb.extents[0])
    if sa.kind == "cylinder":
        return geo.circle_poly_overlap((pa.x, pa.y), sa.extents[0], object_polygon(sb, pb))
    if sb.kind == "cylinder":
        return geo.circle_poly_overlap((pb.x, pb.y), sb.extents[0], object_polygon(sa, pa))
    return geo.polys_overlap(object_polygon(sa, pa), object_polygon(sb, pb))


def footprint_inside_bin(shape: ObjectShape, pose: ScenePose, bin_spec: BinSpec,
                         slack: float = 1e-7) -> bool:
    if shape.kind == "cylinder":
        r = shape.extents[0]
        return (abs(pose.x) + r <= bin_spec.half_x + slack
                and abs(pose.y) + r <= bin_spec.half_y + slack)
    poly = object_polygon(shape, pose)
    return (poly[:, 0].min() >= -bin_spec.half_x - slack
            and poly[:, 0].max() <= bin_spec.half_x + slack
            and poly[:, 1].min() >= -bin_spec.half_y - slack
            and poly[:, 1].max() <= bin_spec.half_y + slack)


# ---------- spawn ----------

def spawn_scene(n_objects: int, shape_pool=DEFAULT_SHAPE_POOL, seed: int = 0,
                bin_spec: BinSpec = DEFAULT_BIN, max_tries: int = 1000) -> SceneState:
    """Rejection-sample non-overlapping poses uniformly inside the bin."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    if not shape_pool:
        raise ValueError("shape pool must be non-empty")
    rng = np.random.default_rng(seed)
    placed: list[tuple[ObjectShape, ScenePose]] = []
    for _ in range(n_objects):
        shape = shape_pool[int(rng.integers(len(shape_pool)))]
        cr = shape.circumradius
        if cr >= bin_spec.half_x or cr >= bin_spec.half_y:
            raise ScenePlacementError("object does not fit inside the bin at any pose")
        for attempt in range(max_tries):
            x = rng.uniform(-bin_spec.half_x + cr, bin_spec.half_x - cr)
            y = rng.uniform(-bin_spec.half_y + cr, bin_spec.half_y - cr)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            cand = (shape, ScenePose(x, y, theta))
            if all(not footprints_overlap(cand, other) for other in placed):
                placed.append(cand)
                break
        else:
            raise ScenePlacementError(
                f"could not place object {len(placed)} after {max_tries} tries")
    return SceneState(bin_spec, placed, seed)


# ---------- grasp feasibility ----------

def _rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _extent_along(shape: ObjectShape, pose: ScenePose, theta: float) -> float:
    """Footprint extent projected onto the closing direction at angle theta."""
    if shape.kind == "cylinder":
        return 2.0 * shape.extents[0]
    sx, sy, _ = shape.extents
    d = pose.theta - theta
    return sx * abs(np.cos(d)) + sy * abs(np.sin(d))


def grasp_feasible_batch(scene: SceneState, centers: np.ndarray, theta: float,
                         width_index: int, gripper: GripperSpec = DEFAULT_GRIPPER) -> np.ndarray:
    """Vectorized grasp feasibility for N world positions at one angle and width.

    A grasp is feasible when (1) something lies between the jaws, (2) the
    target's extent along the closing direction is within the gripper stroke
    range, and (3) both jaw footprints are clear of material above the
    descend height (10 mm below the target top), walls included.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    n = len(centers)
    if not scene.objects:
        return np.zeros(n, dtype=bool)
    width = gripper.preshaped_widths[width_index]
    jaw_len, jaw_thick = gripper.jaw_footprint

    rot_inv = _rotation(-theta)
    centers_g = centers @ rot_inv.T

    seg_h = (width / 2.0, jaw_len / 2.0)
    jaw_h = (jaw_thick / 2.0, jaw_len / 2.0)
    jaw_dx = width / 2.0 + jaw_thick / 2.0

    tops = np.array([s.height for s, _ in scene.objects])
    n_obj = len(scene.objects)
    seg_hit = np.zeros((n_obj, n), dtype=bool)
    jaw_hit = np.zeros((n_obj, n), dtype=bool)
    extent_ok = np.zeros(n_obj, dtype=bool)
    proj_lo = np.zeros(n_obj)        # footprint span along the closing axis
    proj_hi = np.zeros(n_obj)
    shapes_g: list[tuple] = []       # footprints in the gripper frame

    left = centers_g + np.array([-jaw_dx, 0.0])
    right = centers_g + np.array([jaw_dx, 0.0])

    for i, (shape, pose) in enumerate(scene.objects):
        if shape.kind == "cylinder":
            c_g = rot_inv @ np.array([pose.x, pose.y])
            r = shape.extents[0]
            shapes_g.append(("circle", c_g, r))
            seg_hit[i] = geo.aabb_overlaps_circle(centers_g, *seg_h, c_g, r)
            jaw_hit[i] = (geo.aabb_overlaps_circle(left, *jaw_h, c_g, r)
                          | geo.aabb_overlaps_circle(right, *jaw_h, c_g, r))
            proj_lo[i], proj_hi[i] = c_g[0] - r, c_g[0] + r
        else:
            poly_g = object_polygon(shape, pose) @ rot_inv.T
            shapes_g.append(("poly", poly_g, 0.0))
            seg_hit[i] = geo.aabb_overlaps_poly(centers_g, *seg_h, poly_g)
            jaw_hit[i] = (geo.aabb_overlaps_poly(left, *jaw_h, poly_g)
                          | geo.aabb_overlaps_poly(right, *jaw_h, poly_g))
            proj_lo[i], proj_hi[i] = poly_g[:, 0].min(), poly_g[:, 0].max()
        ext = _extent_along(shape, pose, theta)
        extent_ok[i] = MIN_CONTACT_WIDTH_MM <= ext <= gripper.max_stroke

    top_in_seg = np.where(seg_hit, tops[:, None], -np.inf)
    best_top = top_in_seg.max(axis=0)
    has_target = np.isfinite(best_top)
    target = top_in_seg.argmax(axis=0)           # first max index: deterministic
    descend = best_top - DESCEND_BELOW_TOP_MM

    # descend clearance: jaws at the pre-shaped opening must reach the
    # descend height without hitting anything tall enough to matter
    blocked = np.any(jaw_hit & (tops[:, None] > descend[None, :] + _TOL), axis=0)

    # closing clearance: each jaw sweeps inward from the opening to the
    # target's face; that corridor must be just as clear (walls included)
    out_r = centers_g[:, 0] + jaw_dx + jaw_thick / 2.0
    out_l = centers_g[:, 0] - jaw_dx - jaw_thick / 2.0
    face_r = np.where(has_target, proj_hi[target], 0.0)
    face_l = np.where(has_target, proj_lo[target], 0.0)
    hx_r = np.clip((out_r - face_r) / 2.0, 0.0, None)
    hx_l = np.clip((face_l - out_l) / 2.0, 0.0, None)
    corr_r = np.stack([(out_r + face_r) / 2.0, centers_g[:, 1]], axis=-1)
    corr_l = np.stack([(face_l + out_l) / 2.0, centers_g[:, 1]], axis=-1)
    half_len = jaw_len / 2.0

    def corridor_hits(kind, geom, r):
        if kind == "circle":
            hit_r = geo.aabb_overlaps_circle(corr_r, hx_r, half_len, geom, r)
            hit_l = geo.aabb_overlaps_circle(corr_l, hx_l, half_len, geom, r)
        else:
            hit_r = geo.aabb_overlaps_poly(corr_r, hx_r, half_len, geom)
            hit_l = geo.aabb_overlaps_poly(corr_l, hx_l, half_len, geom)
        return (hit_r & (hx_r > _TOL)) | (hit_l & (hx_l > _TOL))

    for i, (kind, geom, r) in enumerate(shapes_g):
        applies = (target != i) & (tops[i] > descend + _TOL)
        if applies.any():
            blocked |= corridor_hits(kind, geom, r) & applies

    if scene.bin.wall_height > 0:
        wall_block = np.zeros(n, dtype=bool)
        for wall in scene.bin.wall_polygons():
            wall_g = wall @ rot_inv.T
            wall_block |= geo.aabb_overlaps_poly(left, *jaw_h, wall_g)
            wall_block |= geo.aabb_overlaps_poly(right, *jaw_h, wall_g)
            wall_block |= corridor_hits("poly", wall_g, 0.0)
        blocked |= wall_block & (scene.bin.wall_height > descend + _TOL)

    return has_target & extent_ok[target] & ~blocked


def grasp_target_index(scene: SceneState, x: float, y: float, theta: float,
                       width_index: int, gripper: GripperSpec = DEFAULT_GRIPPER) -> int | None:
    """Index of the object a feasible grasp at this pose would remove."""
    if not oracle_grasp_feasible(scene, x, y, theta, width_index, gripper):
        return None
    width = gripper.preshaped_widths[width_index]
    jaw_len, _ = gripper.jaw_footprint
    rot_inv = _rotation(-theta)
    center_g = (np.array([[x, y]]) @ rot_inv.T)
    best = None
    for i, (shape, pose) in enumerate(scene.objects):
        if shape.kind == "cylinder":
            c_g = rot_inv @ np.array([pose.x, pose.y])
            hit = geo.aabb_overlaps_circle(center_g, width / 2, jaw_len / 2, c_g, shape.extents[0])[0]
        else:
            poly_g = object_polygon(shape, pose) @ rot_inv.T
            hit = geo.aabb_overlaps_poly(center_g, width / 2, jaw_len / 2, poly_g)[0]
        if hit and (best is None or shape.height > scene.objects[best][0].height + _TOL):
            best = i
    return best


def oracle_grasp_feasible(scene: SceneState, x: float, y: float, theta: float,
                          width_index: int, gripper: GripperSpec = DEFAULT_GRIPPER) -> bool:
    return bool(grasp_feasible_batch(scene, np.array([[x, y]]), theta, width_index, gripper)[0])


def oracle_window_grasp_prob(scene: SceneState, center: tuple[float, float, float],
                             window_side: float, gripper: GripperSpec = DEFAULT_GRIPPER) -> float:
    """Ground-truth windowed grasp probability over the discrete action grid.

    Maximum of oracle_grasp_feasible over grid poses whose world position
    falls inside the window (aligned to the gripper frame at center angle),
    which is 0 or 1 in this deterministic world.
    """
    from . import grid  # local import: grid depends on scene types

    cx, cy, angle = center
    half = window_side / 2.0
    rot_inv = _rotation(-angle)
    layout = grid.default_layout(scene.bin)
    for k in range(layout.n_angles):
        pos = layout.world_positions[:, :, k, :].reshape(-1, 2)
        valid = layout.valid_mask[:, :, k].reshape(-1)
        local = (pos - np.array([cx, cy])) @ rot_inv.T
        in_win = (np.abs(local[:, 0]) <= half + _TOL) & (np.abs(local[:, 1]) <= half + _TOL)
        take = valid & in_win
        if not take.any():
            continue
        theta = layout.angles[k]
        for w in range(len(gripper.preshaped_widths)):
            if grasp_feasible_batch(scene, pos[take], theta, w, gripper).any():
                return 1.0
    return 0.0


# ---------- primitives ----------

def execute_grasp(scene: SceneState, x: float, y: float, theta: float, width_index: int,
                  gripper: GripperSpec = DEFAULT_GRIPPER,
                  time_model: TimeModel = DEFAULT_TIME_MODEL) -> PrimitiveOutcome:
    """Attempt a grasp; on success the target object is removed (pick and file)."""
    target = grasp_target_index(scene, x, y, theta, width_index, gripper)
    if target is None:
        return PrimitiveOutcome(False, scene.copy(), None, time_model.grasp_fail_s)
    remaining = [ob for i, ob in enumerate(scene.objects) if i != target]
    return PrimitiveOutcome(True, SceneState(scene.bin, remaining, scene.rng_seed),
                            target, time_model.grasp_success_s)


def _wall_cap(poly: np.ndarray, u: np.ndarray, bin_spec: BinSpec) -> float:
    """Maximum forward translation along u keeping the polygon inside the bin."""
    cap = np.inf
    if u[0] > _TOL:
        cap = min(cap, (bin_spec.half_x - poly[:, 0].max()) / u[0])
    elif u[0] < -_TOL:
        cap = min(cap, (-bin_spec.half_x - poly[:, 0].min()) / u[0])
    if u[1] > _TOL:
        cap = min(cap, (bin_spec.half_y - poly[:, 1].max()) / u[1])
    elif u[1] < -_TOL:
        cap = min(cap, (-bin_spec.half_y - poly[:, 1].min()) / u[1])
    return max(0.0, float(cap))


def shift_direction(theta: float, direction_index: int) -> np.ndarray:
    """World-frame push direction: gripper +x (index 0) or +y (index 1)."""
    if direction_index == 0:
        return np.array([np.cos(theta), np.sin(theta)])
    return np.array([-np.sin(theta), np.cos(theta)])


def execute_shift(scene: SceneState, x: float, y: float, theta: float, direction_index: int,
                  gripper: GripperSpec = DEFAULT_GRIPPER,
                  time_model: TimeModel = DEFAULT_TIME_MODEL) -> PrimitiveOutcome:
    """Sweep the closed gripper shift_distance along the primitive direction.

    Objects intersecting the swept region are translated along the push
    direction by the minimal penetration-resolving amount; pushes cascade
    through chains of objects and clamp at the bin walls.
    """
    u = shift_direction(theta, direction_index)
    dist = gripper.shift_distance
    jaw_len, jaw_thick = gripper.jaw_footprint
    start = geo.rect_polygon(x, y, jaw_thick, jaw_len / 2.0, theta)
    swept = geo.convex_hull(np.vstack([start, start + dist * u]))

    n_obj = len(scene.objects)
    if n_obj == 0:
        return PrimitiveOutcome(False, scene.copy(), None, time_model.shift_s)

    polys = [object_polygon(s, p) for s, p in scene.objects]

    # direct demands: forward translation that clears the swept region,
    # capped at the sweep distance (nothing is carried farther than the push)
    demand = np.zeros(n_obj)
    for i, poly in enumerate(polys):
        if not geo.polys_overlap(poly, swept):
            continue
        span = geo.sweep_interval(poly, swept, u)
        if span is not None and span[0] < 0.0 < span[1]:
            demand[i] = min(span[1], dist)

    # pairwise first-contact distances along u (inf when never colliding)
    contact = np.full((n_obj, n_obj), np.inf)
    for i in range(n_obj):
        for j in range(n_obj):
            if i == j:
                continue
            span = geo.sweep_interval(polys[i], polys[j], u)
            if span is not None and span[1] > _TOL:
                contact[i, j] = max(span[0], 0.0)

    # optimistic demands through push chains (upper bound, caps ignored)
    upper = demand.copy()
    for _ in range(n_obj):
        changed = False
        for i in range(n_obj):
            transmitted = upper - contact[:, i]
            transmitted[i] = -np.inf
            best = max(float(upper[i]), float(transmitted.max()) if n_obj > 1 else 0.0)
            if best > upper[i] + _TOL:
                upper[i] = best
                changed = True
        if not changed:
            break

    # Final translations are the greatest fixpoint of
    #   t_i = min(wallcap_i, min_j(contact_ij + t_j),
    #             max(direct_i, max_k(t_k - contact_ki)))
    # i.e. each object moves exactly as far as it is pushed (gripper motion
    # is prescribed, transmitted pushes come from actual upstream motion),
    # clamped by the walls and by whatever sits ahead of it. Iterating the
    # monotone update from the optimistic upper bound converges downward.
    caps = np.array([_wall_cap(poly, u, scene.bin) for poly in polys])
    t = np.minimum(upper, caps)
    for _ in range(2 * n_obj + 2):
        changed = False
        for i in range(n_obj):
            ahead = contact[i] + t
            ahead[i] = np.inf
            received = t - contact[:, i]
            received[i] = -np.inf
            new_t = min(float(caps[i]),
                        float(ahead.min()) if n_obj > 1 else np.inf,
                        max(float(demand[i]),
                            float(received.max()) if n_obj > 1 else 0.0, 0.0))
            if abs(new_t - t[i]) > _TOL:
                t[i] = new_t
                changed = True
        if not changed:
            break

    moved = []
    for (shape, pose), ti in zip(scene.objects, t):
        if ti > _TOL:
            pose = replace(pose, x=pose.x + ti * u[0], y=pose.y + ti * u[1])
        moved.append((shape, pose))
    new_scene = SceneState(scene.bin, moved, scene.rng_seed)
    return PrimitiveOutcome(False, new_scene, None, time_model.shift_s)


def scene_digest(scene: SceneState) -> bytes:
    """Stable content key: equal digests iff bin, shapes, and poses are
    bit-equal. Lets callers reuse observations across unchanged scenes."""
    h = hashlib.sha1()
    b = scene.bin
    h.update(np.array([b.inner_length, b.inner_width, b.wall_height,
                       b.wall_thickness], np.float64).tobytes())
    for shape, pose in scene.objects:
        h.update(shape.kind.encode())
        h.update(np.array(shape.extents, np.float64).tobytes())
        h.update(np.array([pose.x, pose.y, pose.theta], np.float64).tobytes())
    return h.digest()


# ---------- serialization ----------

def scene_to_dict(scene: SceneState) -> dict:
    return {
        "bin": {
            "inner_length": scene.bin.inner_length,
            "inner_width": scene.bin.inner_width,
            "wall_height": scene.bin.wall_height,
            "wall_thickness": scene.bin.wall_thickness,
        },
        "objects": [
            {"kind": s.kind, "extents": list(s.extents),
             "pose": {"x": p.x, "y": p.y, "theta": p.theta}}
            for s, p in scene.objects
        ],
        "seed": scene.rng_seed,
    }


def scene_from_dict(data: dict) -> SceneState:
    b = data["bin"]
    bin_spec = BinSpec(b["inner_length"], b["inner_width"], b["wall_height"], b["wall_thickness"])
    objects = [
        (ObjectShape(o["kind"], tuple(o["extents"])),
         ScenePose(o["pose"]["x"], o["pose"]["y"], o["pose"]["theta"]))
        for o in data["objects"]
    ]
    return SceneState(bin_spec, objects, int(data.get("seed", 0)))


def save_scene(scene: SceneState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2)


def load_scene(path) -> SceneState:
    with open(path, encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))
