"""Convex 2-D geometry primitives for the planar simulator.

Everything works on convex polygons given as (n, 2) float arrays in CCW
order, plus analytic circles where exactness is cheap. Units are mm.
Overlap predicates are strict: shapes that merely touch do not overlap.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-9


def _cross2(a: np.ndarray, b: np.ndarray):
    """z-component of the 2-D cross product (np.cross on 2-vectors is deprecated)."""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def rect_polygon(cx: float, cy: float, hx: float, hy: float, theta: float = 0.0) -> np.ndarray:
    """CCW corners of a rectangle centred at (cx, cy) with half-extents (hx, hy)."""
    c, s = np.cos(theta), np.sin(theta)
    local = np.array([(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)], dtype=np.float64)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def regular_polygon(cx: float, cy: float, radius: float, n: int = 64) -> np.ndarray:
    """CCW regular n-gon approximating a disc (used for push mechanics)."""
    ang = np.arange(n) * (2.0 * np.pi / n)
    return np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)


def poly_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def poly_project(poly: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    p = poly @ axis
    return float(p.min()), float(p.max())


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull without repeated endpoint."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    # lexicographic sort is given by np.unique
    def half(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2 and _cross2(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _edge_normals(poly: np.ndarray) -> np.ndarray:
    """Outward normals of a CCW polygon, not normalized."""
    edges = np.roll(poly, -1, axis=0) - poly
    return np.stack([edges[:, 1], -edges[:, 0]], axis=1)


def polys_overlap(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> bool:
    """Strict SAT overlap test for convex CCW polygons."""
    for poly, other in ((a, b), (b, a)):
        normals = _edge_normals(poly)
        for n in normals:
            nn = np.linalg.norm(n)
            if nn < EPS:
                continue
            n = n / nn
            amin, amax = poly_project(a, n)
            bmin, bmax = poly_project(b, n)
            if amax <= bmin + eps or bmax <= amin + eps:
                return False
    return True


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of convex CCW subject against convex CCW clip."""
    out = subject
    m = len(clip)
    for i in range(m):
        if len(out) == 0:
            break
        a, b = clip[i], clip[(i + 1) % m]
        edge = b - a
        # inside = left of the directed edge for CCW clip polygon
        d = _cross2(edge, out - a)
        nxt: list[np.ndarray] = []
        k = len(out)
        for j in range(k):
            p, q = out[j], out[(j + 1) % k]
            dp, dq = d[j], d[(j + 1) % k]
            if dp >= -EPS:
                nxt.append(p)
            if (dp < -EPS) != (dq < -EPS):
                t = dp / (dp - dq)
                nxt.append(p + t * (q - p))
        out = np.array(nxt) if nxt else np.empty((0, 2))
    return out


def intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    clipped = clip_convex(a, b)
    if len(clipped) < 3:
        return 0.0
    return abs(poly_area(clipped))


def circles_overlap(c0, r0, c1, r1, eps: float = EPS) -> bool:
    d2 = float((c0[0] - c1[0]) ** 2 + (c0[1] - c1[1]) ** 2)
    return d2 < (r0 + r1 - eps) ** 2 if r0 + r1 > eps else False


def circle_poly_overlap(center, radius, poly: np.ndarray, eps: float = EPS) -> bool:
    """Strict overlap of an analytic disc with a convex CCW polygon."""
    c = np.asarray(center, dtype=np.float64)
    normals = _edge_normals(poly)
    lens = np.linalg.norm(normals, axis=1)
    normals = normals / lens[:, None]
    # signed distance of the centre outside each edge half-plane
    d = np.einsum("ij,ij->i", normals, c - poly)
    if np.all(d <= eps):
        return True  # centre inside polygon
    # SAT on edge normals
    for n in normals:
        pmin, pmax = poly_project(poly, n)
        cc = float(c @ n)
        if cc - radius >= pmax - eps or cc + radius <= pmin + eps:
            return False
    # SAT on axis from centre to closest vertex (covers corner regions)
    diffs = poly - c
    dist = np.linalg.norm(diffs, axis=1)
    k = int(np.argmin(dist))
    if dist[k] > eps:
        n = diffs[k] / dist[k]
        pmin, pmax = poly_project(poly, n)
        cc = float(c @ n)
        if cc - radius >= pmax - eps or cc + radius <= pmin + eps:
            return False
    return True


def minkowski_difference(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Convex hull of {q_i - p_j}: translations t with (p + t) meeting q."""
    diffs = (q[:, None, :] - p[None, :, :]).reshape(-1, 2)
    return convex_hull(diffs)


def sweep_interval(moving: np.ndarray, static: np.ndarray, direction: np.ndarray):
    """Interval [t_enter, t_exit] where (moving + t*direction) meets static.

    Returns None when the swept line never meets the configuration obstacle.
    Contact at a single boundary point still counts as part of the interval.
    """
    m = minkowski_difference(static, moving)
    if len(m) == 0:
        return None
    if len(m) == 1:
        # degenerate: single translation point
        d = m[0]
        den = direction @ direction
        t = float(d @ direction) / den
        if np.linalg.norm(d - t * direction) < 1e-7:
            return (t, t)
        return None
    if len(m) == 2:
        # degenerate segment: treat as thin polygon via both orderings
        m = np.array([m[0], m[1], m[1], m[0]])
    lo, hi = -np.inf, np.inf
    for i in range(len(m)):
        a, b = m[i], m[(i + 1) % len(m)]
        e = b - a
        n = np.array([e[1], -e[0]])  # outward for CCW
        nu = float(n @ direction)
        rhs = float(n @ a)
        if abs(nu) < 1e-12:
            if 0.0 > rhs + 1e-9:
                return None
        elif nu > 0:
            hi = min(hi, rhs / nu)
        else:
            lo = max(lo, rhs / nu)
    if lo > hi + 1e-12:
        return None
    return (lo, hi)


# ---------- batched tests for the feasibility oracle ----------
# These operate in a frame where the query rectangles are axis-aligned
# (the gripper frame); obstacles are expressed in that frame first.


def aabb_overlaps_poly(centers: np.ndarray, hx, hy, poly: np.ndarray,
                       eps: float = EPS) -> np.ndarray:
    """Strict overlap of axis-aligned rects (centres (n,2)) with one convex CCW polygon.

    hx / hy are scalars or per-row arrays of rectangle half-extents.
    """
    centers = np.atleast_2d(centers)
    hx = np.asarray(hx, dtype=np.float64)
    hy = np.asarray(hy, dtype=np.float64)
    px_min, px_max = poly[:, 0].min(), poly[:, 0].max()
    py_min, py_max = poly[:, 1].min(), poly[:, 1].max()
    ok = ((centers[:, 0] - hx < px_max - eps) & (centers[:, 0] + hx > px_min + eps)
          & (centers[:, 1] - hy < py_max - eps) & (centers[:, 1] + hy > py_min + eps))
    if not ok.any():
        return ok
    normals = _edge_normals(poly)
    lens = np.linalg.norm(normals, axis=1)
    keep = lens > EPS
    normals = normals[keep] / lens[keep, None]
    pmin = (poly @ normals.T).min(axis=0)
    pmax = (poly @ normals.T).max(axis=0)
    proj = centers @ normals.T                      # (n, m)
    radius = (np.multiply.outer(hx, np.abs(normals[:, 0]))
              + np.multiply.outer(hy, np.abs(normals[:, 1])))
    ok &= np.all((proj - radius < pmax - eps) & (proj + radius > pmin + eps), axis=1)
    return ok


def aabb_overlaps_circle(centers: np.ndarray, hx: float, hy: float,
                         c, r: float, eps: float = EPS) -> np.ndarray:
    """Strict overlap of axis-aligned rects with one analytic disc."""
    centers = np.atleast_2d(centers)
    dx = np.clip(np.abs(c[0] - centers[:, 0]) - hx, 0.0, None)
    dy = np.clip(np.abs(c[1] - centers[:, 1]) - hy, 0.0, None)
    return dx * dx + dy * dy < (r - eps) ** 2 if r > eps else np.zeros(len(centers), bool)
