"""Shared geometric primitives: frames, convex polygons, plane fitting, alpha shapes.

All planes are represented by a right-handed frame whose z-axis is the plane
normal (world-z component >= 0) and whose x-axis points uphill, so 2D work in
plane coordinates keeps a consistent orientation across the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay
from scipy.spatial import QhullError

from .errors import DegenerateInput

_PARALLEL_COS = np.cos(np.radians(1.0))


@dataclass(frozen=True)
class Transform:
    """Rigid transform mapping plane-local coordinates to world coordinates.

    ``rotation`` columns are the plane x/y/z axes expressed in world frame;
    ``translation`` is the plane origin (point on the plane).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation is left-handed")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 2]

    def to_local(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - self.translation) @ self.rotation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def surface_world_z(self, x, y):
        """World z of the plane surface at world (x, y); vertical planes rejected."""
        n = self.normal
        if abs(n[2]) < 1e-9:
            raise DegenerateInput("plane is vertical; surface height undefined")
        c = self.translation
        return c[2] - (n[0] * (np.asarray(x) - c[0]) + n[1] * (np.asarray(y) - c[1])) / n[2]


@dataclass(frozen=True)
class Segment3D:
    """Line segment between two world points, stored in canonical order."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(3)
        b = np.asarray(self.b, dtype=float).reshape(3)
        if tuple(b) < tuple(a):
            a, b = b, a
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))

    def point_at(self, t: float) -> np.ndarray:
        return self.a + t * (self.b - self.a)


@dataclass(frozen=True)
class ConvexPolygon2D:
    """Strictly convex polygon, vertices in counter-clockwise order."""

    vertices: np.ndarray = field()

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) < 3:
            raise DegenerateInput("polygon needs at least 3 vertices")
        object.__setattr__(self, "vertices", v)

    @property
    def area(self) -> float:
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        nxt = np.roll(v, -1, axis=0)
        cross = v[:, 0] * nxt[:, 1] - v[:, 1] * nxt[:, 0]
        a = cross.sum() / 2.0
        if abs(a) < 1e-12:
            return v.mean(axis=0)
        return ((v + nxt) * cross[:, None]).sum(axis=0) / (6.0 * a)

    def contains(self, point, tol: float = 1e-9) -> bool:
        return bool(self.contains_points(np.asarray(point, dtype=float)[None, :], tol)[0])

    def contains_points(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Vectorized point-in-polygon test for an (N, 2) array."""
        p = np.asarray(points, dtype=float)
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        # cross(e_i, p - v_i) >= -tol for all edges of a CCW polygon
        d = p[:, None, :] - v[None, :, :]
        cross = e[None, :, 0] * d[:, :, 1] - e[None, :, 1] * d[:, :, 0]
        return np.all(cross >= -tol, axis=1)

    def bounds(self) -> tuple[float, float, float, float]:
        v = self.vertices
        return (
            float(v[:, 0].min()), float(v[:, 1].min()),
            float(v[:, 0].max()), float(v[:, 1].max()),
        )


def convex_hull(points: np.ndarray) -> ConvexPolygon2D:
    """Convex hull of 2D points via the monotone chain, CCW and strictly convex.

    Collinear vertices are dropped so every interior hull angle is strict.
    Raises DegenerateInput when the points are coincident or collinear.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateInput("hull needs at least 3 points")
    uniq = np.unique(pts, axis=0)  # sorts lexicographically
    if len(uniq) < 3:
        raise DegenerateInput("hull needs 3 distinct points")

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    eps = 1e-12
    lower: list[np.ndarray] = []
    for p in uniq:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= eps:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in uniq[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= eps:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateInput("points are collinear")
    return ConvexPolygon2D(np.array(hull))


def expand_polygon(poly: ConvexPolygon2D, margin: float) -> ConvexPolygon2D:
    """Grow a convex polygon by pushing each vertex radially away from the centroid."""
    if margin < 0.0:
        raise ValueError("margin must be non-negative")
    if margin == 0.0:
        return poly
    c = poly.centroid
    d = poly.vertices - c
    norms = np.linalg.norm(d, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateInput("polygon vertex coincides with centroid")
    moved = poly.vertices + margin * d / norms[:, None]
    return convex_hull(moved)


def clip_line_to_polygon(origin, direction, poly: ConvexPolygon2D):
    """Parameter interval (tmin, tmax) of origin + t*direction inside the polygon.

    Returns None for an empty intersection. ``direction`` need not be unit.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    v = poly.vertices
    e = np.roll(v, -1, axis=0) - v
    a = e[:, 0] * (o[1] - v[:, 1]) - e[:, 1] * (o[0] - v[:, 0])
    b = e[:, 0] * d[1] - e[:, 1] * d[0]
    tlo, thi = -np.inf, np.inf
    for ai, bi in zip(a, b):
        if abs(bi) < 1e-14:
            if ai < 0.0:
                return None
            continue
        t = -ai / bi
        if bi > 0.0:
            tlo = max(tlo, t)
        else:
            thi = min(thi, t)
    if tlo >= thi:
        return None
    return tlo, thi


def fit_plane(points: np.ndarray) -> tuple[Transform, float, float]:
    """Least-squares plane through a 3D cloud.

    Returns (transform, inclination, thickness). The frame z-axis is the
    smallest-variance direction with world-z component >= 0 (vertical planes
    break the tie toward +x, then +y); the x-axis is the normalized
    projection of world +z onto the plane (ascent direction), falling back
    to projected world +x for near-horizontal planes. Inclination is the
    angle between the normal and world +z; thickness is the RMS distance of
    the points from the fitted plane.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateInput("plane fit needs at least 3 points")
    centroid = pts.mean(axis=0)
    q = pts - centroid
    cov = q.T @ q / len(pts)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[2] < 1e-18:
        raise DegenerateInput("points are coincident")
    if evals[1] < 1e-10 * evals[2]:
        raise DegenerateInput("points are collinear")
    normal = evecs[:, 0]
    if abs(normal[2]) > 1e-8:
        sign = np.sign(normal[2])
    elif abs(normal[0]) > 1e-8:
        sign = np.sign(normal[0])
    else:
        sign = np.sign(normal[1]) or 1.0
    normal = normal * sign

    inclination = float(np.arccos(np.clip(normal[2], -1.0, 1.0)))
    x_axis = np.array([0.0, 0.0, 1.0]) - normal[2] * normal
    if np.linalg.norm(x_axis) < 1e-6:
        x_axis = np.array([1.0, 0.0, 0.0]) - normal[0] * normal
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(normal, x_axis)
    rotation = np.column_stack([x_axis, y_axis, normal])
    thickness = float(np.sqrt(max(evals[0], 0.0)))
    return Transform(rotation, centroid), inclination, thickness


def plane_polygon_intersection(a, b, margin: float, min_length: float = 0.4):
    """Common segment of two bounded planes, or None.

    ``a`` and ``b`` carry a ``transform`` and a convex ``boundary`` in their
    own plane coordinates. Both boundaries are expanded by ``margin`` before
    clipping; segments shorter than ``min_length`` are discarded. Planes
    within 1 degree of parallel never intersect.
    """
    na, nb = a.transform.normal, b.transform.normal
    if abs(float(np.dot(na, nb))) > _PARALLEL_COS:
        return None
    d = np.cross(na, nb)
    d = d / np.linalg.norm(d)
    ca, cb = a.transform.translation, b.transform.translation
    mat = np.vstack([na, nb, d])
    rhs = np.array([np.dot(na, ca), np.dot(nb, cb), np.dot(d, 0.5 * (ca + cb))])
    p0 = np.linalg.solve(mat, rhs)

    interval = [-np.inf, np.inf]
    for plane in (a, b):
        poly = expand_polygon(plane.boundary, margin)
        o_local = plane.transform.to_local(p0)[:2]
        d_local = (plane.transform.rotation.T @ d)[:2]
        if np.linalg.norm(d_local) < 1e-9:
            return None
        span = clip_line_to_polygon(o_local, d_local, poly)
        if span is None:
            return None
        interval[0] = max(interval[0], span[0])
        interval[1] = min(interval[1], span[1])
    if not np.isfinite(interval).all() or interval[1] - interval[0] < min_length:
        return None
    return Segment3D(p0 + interval[0] * d, p0 + interval[1] * d)


def convex_intersection_area(a: ConvexPolygon2D, b: ConvexPolygon2D) -> float:
    """Area of the intersection of two convex polygons (Sutherland-Hodgman)."""
    subject = [tuple(v) for v in a.vertices]
    clip = b.vertices
    for k in range(len(clip)):
        if not subject:
            return 0.0
        cp1 = clip[k]
        cp2 = clip[(k + 1) % len(clip)]
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def inside(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0]) >= -1e-12

        def intersect(p, q):
            dx, dy = q[0] - p[0], q[1] - p[1]
            denom = ex * dy - ey * dx
            if abs(denom) < 1e-14:
                return q
            t = (ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0])) / -denom
            return (p[0] + t * dx, p[1] + t * dy)

        output = []
        prev = subject[-1]
        for cur in subject:
            if inside(cur):
                if not inside(prev):
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif inside(prev):
                output.append(intersect(prev, cur))
            prev = cur
        subject = output
    if len(subject) < 3:
        return 0.0
    arr = np.asarray(subject)
    x, y = arr[:, 0], arr[:, 1]
    return abs(0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def alpha_shape_boundary(points: np.ndarray, alpha: float) -> np.ndarray:
    """Indices of the points on the alpha-shape boundary of a 2D cloud.

    Triangles of the Delaunay triangulation survive when their circumradius
    is below ``alpha``; boundary edges are those used by exactly one
    surviving triangle. Degenerate clouds (collinear, or nothing survives
    the filter) fall back to reporting every point as boundary.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        raise DegenerateInput("empty point set")
    if np.max(np.ptp(pts, axis=0)) < 1e-9:
        raise DegenerateInput("points are coincident")
    if n <= 3:
        return np.arange(n)
    try:
        tri = Delaunay(pts)
    except QhullError:
        return np.arange(n)

    simplices = tri.simplices
    pa = pts[simplices[:, 0]]
    pb = pts[simplices[:, 1]]
    pc = pts[simplices[:, 2]]
    la = np.linalg.norm(pb - pc, axis=1)
    lb = np.linalg.norm(pa - pc, axis=1)
    lc = np.linalg.norm(pa - pb, axis=1)
    area2 = np.abs(
        (pb[:, 0] - pa[:, 0]) * (pc[:, 1] - pa[:, 1])
        - (pb[:, 1] - pa[:, 1]) * (pc[:, 0] - pa[:, 0])
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        circumradius = np.where(area2 > 1e-14, la * lb * lc / (2.0 * area2), np.inf)
    kept = simplices[circumradius < alpha]
    if len(kept) == 0:
        return np.arange(n)

    edges = np.concatenate([kept[:, [0, 1]], kept[:, [1, 2]], kept[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    boundary_edges = uniq[counts == 1]
    return np.unique(boundary_edges)
