"""Planar geometry on quadrilaterals: areas, hulls, rotated boxes, clipping, homographies.

Points are (x, y) in pixel coordinates with y pointing down; a pixel (i, j)
covers the square [i, i+1) x [j, j+1).  Quads are stored clockwise on screen
(top-left, top-right, bottom-right, bottom-left), which is counter-clockwise
in the usual mathematical orientation, so their shoelace area is positive
with the formula used here.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "polygon_area",
    "convex_hull",
    "min_area_rect",
    "clip_convex",
    "convex_iou",
    "homography",
    "apply_homography",
    "points_in_convex",
    "order_quad",
]


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for clockwise-on-screen order."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; returns vertices in positive-area order."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)
    lower: list[tuple] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def order_quad(quad) -> np.ndarray:
    """Reorder 4 corners as top-left, top-right, bottom-right, bottom-left."""
    q = np.asarray(quad, dtype=np.float64)
    c = q.mean(axis=0)
    ang = np.arctan2(q[:, 1] - c[1], q[:, 0] - c[0])
    q = q[np.argsort(ang)]  # clockwise on screen, starting from the left
    start = int(np.argmin(q[:, 0] + q[:, 1]))
    return np.roll(q, -start, axis=0)


def min_area_rect(points) -> np.ndarray:
    """Smallest-area enclosing rectangle via rotating calipers on the hull."""
    hull = convex_hull(points)
    if len(hull) == 0:
        raise ValueError("no points")
    if len(hull) < 3:
        lo, hi = hull.min(axis=0), hull.max(axis=0)
        return np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        norm = np.hypot(*e)
        if norm == 0:
            continue
        u = e / norm
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, u, v, pu.min(), pu.max(), pv.min(), pv.max())
    _, u, v, a0, a1, b0, b1 = best
    corners = np.array([a0 * u + b0 * v, a1 * u + b0 * v, a1 * u + b1 * v, a0 * u + b1 * v])
    return order_quad(corners)


def clip_convex(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman: intersection of two convex polygons."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    c = np.asarray(clip, dtype=np.float64)
    if polygon_area(c) < 0:
        c = c[::-1]
    for i in range(len(c)):
        a, b = c[i], c[(i + 1) % len(c)]
        inp, out = out, []
        if not inp:
            break

        def inside(p):
            return _cross(a, b, p) >= 0

        def meet(p, q):
            d1, d2 = _cross(a, b, p), _cross(a, b, q)
            t = d1 / (d1 - d2)
            return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

        prev = inp[-1]
        for cur in inp:
            if inside(cur):
                if not inside(prev):
                    out.append(meet(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(meet(prev, cur))
            prev = cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def convex_iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a, area_b = abs(polygon_area(a)), abs(polygon_area(b))
    if area_a <= 0 or area_b <= 0:
        return 0.0
    if polygon_area(a) < 0:
        a = a[::-1]
    inter = abs(polygon_area(clip_convex(a, b)))
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


def homography(src, dst) -> np.ndarray:
    """3x3 projective map taking the 4 ``src`` points onto the 4 ``dst`` points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(rows), np.array(rhs))
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(h: np.ndarray, pts) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    flat = p.reshape(-1, 2)
    q = np.c_[flat, np.ones(len(flat))] @ h.T
    return (q[:, :2] / q[:, 2:3]).reshape(p.shape)


def points_in_convex(poly, pts) -> np.ndarray:
    """Boolean mask of points inside (or on) a convex polygon."""
    poly = np.asarray(poly, dtype=np.float64)
    if polygon_area(poly) < 0:
        poly = poly[::-1]
    pts = np.asarray(pts, dtype=np.float64)
    inside = np.ones(len(pts), dtype=bool)
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross >= -1e-9
    return inside
