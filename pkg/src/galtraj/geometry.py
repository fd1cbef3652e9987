"""Planar polygon and polyline helpers (vectorised numpy)."""
from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError


def as_polygon(poly) -> np.ndarray:
    poly = np.asarray(poly, dtype=float)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise ConfigurationError(f"polygon must be (M>=3, 2), got shape {poly.shape}")
    if abs(polygon_area(poly)) < 1e-9:
        raise ConfigurationError("degenerate polygon (zero area)")
    return poly


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_intersect(p1, p2, q1, q2, eps: float = 1e-9) -> bool:
    scale = max(np.abs(np.concatenate([p1, p2, q1, q2])).max(), 1.0) ** 2

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0.0 if abs(v) <= eps * scale else v

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True

    def on_segment(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    return ((d1 == 0 and on_segment(q1, q2, p1)) or (d2 == 0 and on_segment(q1, q2, p2))
            or (d3 == 0 and on_segment(p1, p2, q1)) or (d4 == 0 and on_segment(p1, p2, q2)))


def is_simple_polygon(poly) -> bool:
    """True if no two non-adjacent edges intersect."""
    poly = np.asarray(poly, dtype=float)
    m = len(poly)
    if m < 3:
        return False
    edges = [(poly[i], poly[(i + 1) % m]) for i in range(m)]
    for i in range(m):
        for j in range(i + 1, m):
            if j == i + 1 or (i == 0 and j == m - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def points_in_polygon(points, poly) -> np.ndarray:
    """Even-odd ray casting; ``points`` has shape (..., 2)."""
    points = np.asarray(points, dtype=float)
    poly = np.asarray(poly, dtype=float)
    shape = points.shape[:-1]
    px = points.reshape(-1, 2)[:, 0:1]
    py = points.reshape(-1, 2)[:, 1:2]
    x0, y0 = poly[:, 0][None, :], poly[:, 1][None, :]
    x1, y1 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    crosses = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    inside = np.logical_and(crosses, px < x_at).sum(axis=1) % 2 == 1
    return inside.reshape(shape)


def nearest_boundary_points(points, poly) -> tuple[np.ndarray, np.ndarray]:
    """Closest point on the polygon boundary and the distance to it."""
    points = np.asarray(points, dtype=float)
    poly = np.asarray(poly, dtype=float)
    shape = points.shape[:-1]
    p = points.reshape(-1, 1, 2)
    a = poly[None, :, :]
    b = np.roll(poly, -1, axis=0)[None, :, :]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-300)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    d2 = ((p - proj) ** 2).sum(-1)
    idx = d2.argmin(axis=1)
    rows = np.arange(len(idx))
    nearest = proj[rows, idx]
    dist = np.sqrt(d2[rows, idx])
    return nearest.reshape(shape + (2,)), dist.reshape(shape)


def outside_distance(points, poly) -> tuple[np.ndarray, np.ndarray]:
    """Distance outside the polygon (0 inside) and its gradient w.r.t. the points."""
    points = np.asarray(points, dtype=float)
    inside = points_in_polygon(points, poly)
    nearest, dist = nearest_boundary_points(points, poly)
    d_out = np.where(inside, 0.0, dist)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = (points - nearest) / dist[..., None]
    grad = np.where((inside | (dist == 0))[..., None], 0.0, unit)
    return d_out, grad


# ---------------------------------------------------------------- polylines


def arc_lengths(polyline) -> np.ndarray:
    polyline = np.asarray(polyline, dtype=float)
    seg = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_polyline(polyline, spacing: float) -> np.ndarray:
    polyline = np.asarray(polyline, dtype=float)
    s = arc_lengths(polyline)
    n = max(int(np.ceil(s[-1] / spacing)), 1) + 1
    grid = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(grid, s, polyline[:, 0]), np.interp(grid, s, polyline[:, 1])], axis=1)


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi
