"""Traversable-plane extraction from raw point clouds.

Turns an unorganized cloud into a set of planar regions the robot can
stand on (floors, ramps, merged staircases), plus the vertical planes
that act as obstacles, and wires each traversable plane with its
neighbour crossing segments and a local grid map.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInput, EmptyCloud, NoTraversablePlane
from .geometry import (
    ConvexPolygon2D,
    Segment3D,
    Transform,
    alpha_shape_boundary,
    convex_hull,
    convex_intersection_area,
    expand_polygon,
    fit_plane,
    plane_polygon_intersection,
)
from .mapping import GridMap, MappingConfig, build_grid


def thread_count() -> int:
    """Worker count from PLANEWAY_THREADS (default 1)."""
    raw = os.environ.get("PLANEWAY_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


class PlaneKind(enum.Enum):
    GROUND = "ground"
    SLOPE = "slope"
    STAIRS = "stairs"
    VERTICAL = "vertical"


TRAVERSABLE_KINDS = (PlaneKind.GROUND, PlaneKind.SLOPE, PlaneKind.STAIRS)


@dataclass
class ExtractionConfig:
    """Tunables for the extraction pipeline."""

    voxel_size: float = 0.05
    k_neighbors: int = 20
    outlier_std: float = 2.0

    angle_threshold_deg: float = 10.0
    dist_threshold: float = 0.05
    min_segment_points: int = 50
    min_core_points: int = 12
    max_thickness: float = 0.025
    completion_tol: float = 0.03
    completion_passes: int = 3

    ground_max_inclination_deg: float = 10.0
    traversable_max_inclination_deg: float = 40.0

    tread_max_inclination_deg: float = 15.0
    max_tread_depth: float = 0.6
    rise_min: float = 0.08
    rise_max: float = 0.35
    rise_regularity: float = 0.3
    gap_threshold: float = 0.25
    riser_min_inclination_deg: float = 60.0
    stair_absorb_distance: float = 0.15

    thickness_gap: float = 0.1
    area_ratio_min: float = 0.8
    area_ratio_max: float = 1.25

    expansion_margin: float = 0.35
    min_interline_length: float = 0.4
    alpha: float = 0.2


@dataclass
class PointCloud:
    """Points with optional per-point unit normals.

    curvature and knn are caches filled by preprocess so later stages
    can reuse the neighbourhood analysis.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    curvature: np.ndarray | None = field(default=None, repr=False)
    knn: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals/points length mismatch")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PlaneSegment:
    """A planar region found by segmentation.

    indices refer to the preprocessed cloud the segment was grown from.
    """

    indices: np.ndarray
    transform: Transform
    inclination: float
    thickness: float
    kind: PlaneKind
    merged: bool = False

    @property
    def centroid(self) -> np.ndarray:
        return self.transform.translation


@dataclass
class TraversablePlane:
    """A walkable plane with its boundary, neighbours and grid map.

    neighbors maps the index of an adjacent plane (within the returned
    list) to the 3D crossing segment shared with it.
    """

    index: int
    transform: Transform
    inclination: float
    thickness: float
    kind: PlaneKind
    boundary: ConvexPolygon2D
    expanded_boundary: ConvexPolygon2D
    points_local: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    neighbors: dict[int, Segment3D] = field(default_factory=dict)
    grid: GridMap | None = None

    @property
    def heading_offset(self) -> float:
        """World yaw of the plane's local x axis."""
        r = self.transform.rotation
        return float(np.arctan2(r[1, 0], r[0, 0]))

    def surface_z(self, x: float, y: float) -> float:
        return self.transform.surface_world_z(x, y)


def _voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def _remove_outliers(points: np.ndarray, k: int, n_std: float) -> np.ndarray:
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=k + 1, workers=thread_count())
    mean_dist = dists[:, 1:].mean(axis=1)
    cutoff = mean_dist.mean() + n_std * mean_dist.std()
    return points[mean_dist <= cutoff]


def _knn_pca(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point PCA over k nearest neighbours.

    Returns (normals, curvatures, neighbor_indices).  Normals are the
    smallest-eigenvalue directions, oriented into the +z hemisphere with
    +x then +y tie-breaks; curvature is lambda_0 / trace.
    """
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1, workers=thread_count())
    neigh = points[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / idx.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    trace = np.maximum(evals.sum(axis=1), 1e-300)
    curvature = evals[:, 0] / trace

    sign = np.sign(normals[:, 2])
    flat = sign == 0.0
    if np.any(flat):
        sign[flat] = np.sign(normals[flat, 0])
        still = flat & (sign == 0.0)
        sign[still] = np.sign(normals[still, 1])
        sign[sign == 0.0] = 1.0
    normals = normals * sign[:, None]
    return normals, curvature, idx


def preprocess(cloud: PointCloud, config: ExtractionConfig | None = None) -> PointCloud:
    """Downsample, drop statistical outliers and estimate normals."""
    config = config or ExtractionConfig()
    points = cloud.points
    if len(points) == 0:
        raise EmptyCloud("no points")
    points = _voxel_downsample(points, config.voxel_size)
    if len(points) <= config.k_neighbors + 1:
        raise EmptyCloud(f"{len(points)} distinct points after downsampling")
    points = _remove_outliers(points, config.k_neighbors, config.outlier_std)
    if len(points) <= config.k_neighbors + 1:
        raise EmptyCloud(f"{len(points)} points after outlier removal")
    normals, curvature, idx = _knn_pca(points, config.k_neighbors)
    return PointCloud(points=points, normals=normals, curvature=curvature, knn=idx)


def _classify(inclination: float, config: ExtractionConfig, merged: bool) -> PlaneKind:
    deg = np.degrees(inclination)
    if deg >= config.traversable_max_inclination_deg:
        return PlaneKind.VERTICAL
    if merged:
        return PlaneKind.STAIRS
    if deg < config.ground_max_inclination_deg:
        return PlaneKind.GROUND
    return PlaneKind.SLOPE


def _segment_from_indices(
    indices: np.ndarray,
    points: np.ndarray,
    config: ExtractionConfig,
    merged: bool = False,
) -> PlaneSegment:
    transform, inclination, thickness = fit_plane(points[indices])
    return PlaneSegment(
        indices=indices,
        transform=transform,
        inclination=inclination,
        thickness=thickness,
        kind=_classify(inclination, config, merged),
        merged=merged,
    )


def region_growing(
    cloud: PointCloud, config: ExtractionConfig | None = None
) -> list[PlaneSegment]:
    """Grow smooth planar regions from low-curvature seeds.

    Neighbours join a region when their normal is within the angle
    threshold of the running plane normal and they lie within the
    distance threshold of the running plane.  Region cores then absorb
    the unclaimed points left along fold lines; what remains smaller
    than min_segment_points, or too thick to be a surface, is discarded.
    """
    config = config or ExtractionConfig()
    points = cloud.points
    if cloud.normals is None or cloud.curvature is None or cloud.knn is None:
        normals, curvature, idx = _knn_pca(points, config.k_neighbors)
        if cloud.normals is not None:
            normals = cloud.normals
    else:
        normals, curvature, idx = cloud.normals, cloud.curvature, cloud.knn

    n = len(points)
    cos_thresh = np.cos(np.radians(config.angle_threshold_deg))
    order = np.argsort(curvature, kind="stable")
    free = np.ones(n, dtype=bool)
    segments: list[PlaneSegment] = []

    for seed in order:
        if not free[seed]:
            continue
        free[seed] = False
        members = [np.array([seed])]
        count = 1
        sum1 = points[seed].copy()
        sum2 = np.outer(points[seed], points[seed])
        plane_normal = normals[seed]
        plane_point = points[seed]
        frontier = np.array([seed])

        while frontier.size:
            cand = np.unique(idx[frontier].ravel())
            cand = cand[free[cand]]
            if cand.size == 0:
                break
            ok_angle = np.abs(normals[cand] @ plane_normal) >= cos_thresh
            ok_dist = (
                np.abs((points[cand] - plane_point) @ plane_normal)
                < config.dist_threshold
            )
            accepted = cand[ok_angle & ok_dist]
            if accepted.size == 0:
                break
            free[accepted] = False
            members.append(accepted)
            count += accepted.size
            sum1 += points[accepted].sum(axis=0)
            sum2 += points[accepted].T @ points[accepted]

            centroid = sum1 / count
            cov = sum2 / count - np.outer(centroid, centroid)
            _, evecs = np.linalg.eigh(cov)
            new_normal = evecs[:, 0]
            if new_normal @ plane_normal < 0:
                new_normal = -new_normal
            plane_normal = new_normal
            plane_point = centroid
            frontier = accepted

        if count >= config.min_core_points:
            indices = np.sort(np.concatenate(members))
            try:
                segments.append(_segment_from_indices(indices, points, config))
            except DegenerateInput:
                pass  # collinear sliver (e.g. points along a fold line)

    segments = _complete_segments(segments, points, idx, config)
    return [
        s
        for s in segments
        if len(s.indices) >= config.min_segment_points
        and s.thickness <= config.max_thickness
    ]


def _complete_segments(
    segments: list[PlaneSegment],
    points: np.ndarray,
    knn: np.ndarray,
    config: ExtractionConfig,
) -> list[PlaneSegment]:
    """Attach leftover points to the nearest adjacent segment plane.

    Normal estimates smear across fold lines, so region growing leaves
    a band of unclaimed points along every crease (stair nosings, wall
    feet). Points adjacent to a claimed region and within completion_tol
    of its plane belong to that surface; each pass extends the reach by
    one neighbourhood hop.
    """
    if not segments:
        return segments
    n = len(points)
    owner = np.full(n, -1, dtype=np.int32)
    for si, seg in enumerate(segments):
        owner[seg.indices] = si

    for _ in range(config.completion_passes):
        neigh_owner = owner[knn]
        best_dist = np.full(n, np.inf)
        best_seg = np.full(n, -1, dtype=np.int32)
        unclaimed = owner < 0
        for si, seg in enumerate(segments):
            cand = unclaimed & (neigh_owner == si).any(axis=1)
            if not cand.any():
                continue
            normal = seg.transform.normal
            dist = np.abs((points[cand] - seg.centroid) @ normal)
            ok = dist < config.completion_tol
            rows = np.flatnonzero(cand)[ok]
            better = dist[ok] < best_dist[rows]
            rows = rows[better]
            best_dist[rows] = dist[ok][better]
            best_seg[rows] = si
        grabbed = best_seg >= 0
        if not grabbed.any():
            break
        owner[grabbed] = best_seg[grabbed]

    completed = []
    for si, seg in enumerate(segments):
        indices = np.flatnonzero(owner == si)
        if len(indices) == len(seg.indices):
            completed.append(seg)
            continue
        try:
            completed.append(_segment_from_indices(indices, points, config))
        except DegenerateInput:
            completed.append(seg)
    return completed


def _world_bbox(points: np.ndarray) -> np.ndarray:
    return np.array(
        [points[:, 0].min(), points[:, 0].max(), points[:, 1].min(), points[:, 1].max()]
    )


def _bbox_gap(a: np.ndarray, b: np.ndarray) -> float:
    dx = max(0.0, max(b[0] - a[1], a[0] - b[1]))
    dy = max(0.0, max(b[2] - a[3], a[2] - b[3]))
    return float(np.hypot(dx, dy))


def _footprint_extents(segment: PlaneSegment, points: np.ndarray) -> np.ndarray:
    """Sorted side lengths of the horizontal bounding box."""
    bbox = _world_bbox(points[segment.indices])
    return np.sort([bbox[1] - bbox[0], bbox[3] - bbox[2]])


def merge_stairs(
    segments: list[PlaneSegment],
    cloud: PointCloud,
    config: ExtractionConfig | None = None,
) -> list[PlaneSegment]:
    """Fuse chains of stair treads into single inclined planes.

    Tread candidates are near-horizontal segments whose footprint is
    shallow in one direction.  Chains link treads separated by a
    plausible, regular rise and adjacent in plan view.  Riser segments
    falling inside a merged chain's extent are folded into the chain:
    their points fill the stripes between tread bands when the merged
    plane is rasterized, while the plane fit itself stays tread-only.
    """
    config = config or ExtractionConfig()
    points = cloud.points

    tread_ids = []
    for i, seg in enumerate(segments):
        if np.degrees(seg.inclination) >= config.tread_max_inclination_deg:
            continue
        if _footprint_extents(seg, points)[0] > config.max_tread_depth:
            continue
        tread_ids.append(i)

    heights = {i: float(segments[i].centroid[2]) for i in tread_ids}
    bboxes = {i: _world_bbox(points[segments[i].indices]) for i in tread_ids}
    tread_ids.sort(key=lambda i: heights[i])

    same_level_tol = 0.5 * config.rise_min

    def _absorb_fragments(level: list[int], consumed: set[int]) -> None:
        # a tread may come out of region growing in several pieces
        grown = True
        while grown:
            grown = False
            for cand in tread_ids:
                if cand in consumed or cand in level:
                    continue
                if abs(heights[cand] - heights[level[0]]) > same_level_tol:
                    continue
                if all(
                    _bbox_gap(bboxes[m], bboxes[cand]) > config.gap_threshold
                    for m in level
                ):
                    continue
                level.append(cand)
                grown = True

    consumed: set[int] = set()
    chains: list[list[list[int]]] = []
    for start in tread_ids:
        if start in consumed:
            continue
        level = [start]
        _absorb_fragments(level, consumed)
        levels = [level]
        rises: list[float] = []
        while True:
            cur = levels[-1]
            cur_h = float(np.mean([heights[m] for m in cur]))
            nxt = None
            for cand in tread_ids:
                if cand in consumed or any(cand in lv for lv in levels):
                    continue
                rise = heights[cand] - cur_h
                if rise < config.rise_min or rise > config.rise_max:
                    continue
                if all(
                    _bbox_gap(bboxes[m], bboxes[cand]) > config.gap_threshold
                    for m in cur
                ):
                    continue
                trial = rises + [rise]
                mean_rise = float(np.mean(trial))
                if (
                    max(abs(r - mean_rise) for r in trial)
                    > config.rise_regularity * mean_rise
                ):
                    continue
                nxt = cand
                break
            if nxt is None:
                break
            level = [nxt]
            _absorb_fragments(level, consumed)
            rises.append(float(np.mean([heights[m] for m in level])) - cur_h)
            levels.append(level)
        if len(levels) < 2:
            continue
        for lv in levels:
            consumed.update(lv)
        chains.append(levels)

    merged_segments: list[PlaneSegment] = []
    merged_bboxes: list[tuple[np.ndarray, float, float]] = []
    for levels in chains:
        member_ids = [i for level in levels for i in level]
        indices = np.sort(
            np.concatenate([segments[i].indices for i in member_ids])
        )
        merged_segments.append(
            _segment_from_indices(indices, points, config, merged=True)
        )
        pts = points[indices]
        merged_bboxes.append(
            (_world_bbox(pts), float(pts[:, 2].min()), float(pts[:, 2].max()))
        )

    out: list[PlaneSegment] = []
    absorbed: dict[int, list[np.ndarray]] = {}
    for i, seg in enumerate(segments):
        if i in consumed:
            continue
        if np.degrees(seg.inclination) >= config.riser_min_inclination_deg:
            c = seg.centroid
            owner = None
            for m, (bbox, zmin, zmax) in enumerate(merged_bboxes):
                g = config.gap_threshold
                if (
                    bbox[0] - g <= c[0] <= bbox[1] + g
                    and bbox[2] - g <= c[1] <= bbox[3] + g
                    and zmin - g <= c[2] <= zmax + g
                ):
                    owner = m
                    break
            if owner is not None:
                absorbed.setdefault(owner, []).append(seg.indices)
                continue
        out.append(seg)
    for m, extra in absorbed.items():
        seg = merged_segments[m]
        seg.indices = np.sort(np.concatenate([seg.indices, *extra]))

    # sweep up stray points inside each chain's extent: riser remnants and
    # tread fragments too small to have survived segmentation would
    # otherwise punch holes in the merged plane's grid
    if merged_segments:
        claimed = np.zeros(len(points), dtype=bool)
        for seg in segments:
            claimed[seg.indices] = True
        for m, (bbox, zmin, zmax) in enumerate(merged_bboxes):
            seg = merged_segments[m]
            g = config.gap_threshold
            cand = (
                ~claimed
                & (points[:, 0] >= bbox[0] - g)
                & (points[:, 0] <= bbox[1] + g)
                & (points[:, 1] >= bbox[2] - g)
                & (points[:, 1] <= bbox[3] + g)
                & (points[:, 2] >= zmin - g)
                & (points[:, 2] <= zmax + g)
            )
            if not cand.any():
                continue
            stray = np.flatnonzero(cand)
            offset = (points[stray] - seg.transform.translation) @ seg.transform.normal
            stray = stray[np.abs(offset) <= config.stair_absorb_distance]
            if len(stray):
                claimed[stray] = True
                seg.indices = np.sort(np.concatenate([seg.indices, stray]))

    out.extend(merged_segments)
    return out


def _local_hull(segment: PlaneSegment, points: np.ndarray) -> ConvexPolygon2D:
    local = segment.transform.to_local(points[segment.indices])
    return convex_hull(local[:, :2])


def _hulls_overlap(
    a: PlaneSegment, b: PlaneSegment, points: np.ndarray
) -> bool:
    hull_a = _local_hull(a, points)
    b_in_a = a.transform.to_local(points[b.indices])[:, :2]
    try:
        hull_b = convex_hull(b_in_a)
    except Exception:
        return False
    return convex_intersection_area(hull_a, hull_b) > 1e-9


def merge_coplanar(
    segments: list[PlaneSegment],
    cloud: PointCloud,
    config: ExtractionConfig | None = None,
) -> tuple[list[PlaneSegment], list[PlaneSegment]]:
    """Merge coplanar overlapping segments, drop buried near-duplicates.

    Returns (traversable, vertical).  Two segments merge when their
    normals agree within the angle threshold, each centroid lies within
    the distance threshold of the other plane, and their footprints
    overlap.  A traversable segment sitting just beneath a similar-area
    one (within thickness_gap) is treated as the underside of the same
    physical surface and removed.
    """
    config = config or ExtractionConfig()
    points = cloud.points
    cos_thresh = np.cos(np.radians(config.angle_threshold_deg))

    segs = list(segments)
    changed = True
    while changed:
        changed = False
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                a, b = segs[i], segs[j]
                if abs(a.transform.normal @ b.transform.normal) < cos_thresh:
                    continue
                d_ab = abs((b.centroid - a.centroid) @ a.transform.normal)
                d_ba = abs((a.centroid - b.centroid) @ b.transform.normal)
                if d_ab >= config.dist_threshold or d_ba >= config.dist_threshold:
                    continue
                if not _hulls_overlap(a, b, points):
                    continue
                indices = np.sort(np.concatenate([a.indices, b.indices]))
                merged = _segment_from_indices(
                    indices, points, config, merged=a.merged or b.merged
                )
                segs[i] = merged
                del segs[j]
                changed = True
                break
            if changed:
                break

    traversable = [s for s in segs if s.kind in TRAVERSABLE_KINDS]
    vertical = [s for s in segs if s.kind is PlaneKind.VERTICAL]

    drop: set[int] = set()
    for i in range(len(traversable)):
        for j in range(len(traversable)):
            if i == j or j in drop or i in drop:
                continue
            upper, lower = traversable[i], traversable[j]
            if abs(upper.transform.normal @ lower.transform.normal) < cos_thresh:
                continue
            sep = (upper.centroid - lower.centroid) @ upper.transform.normal
            if not (0.0 < sep <= config.thickness_gap):
                continue
            area_u = _local_hull(upper, points).area
            area_l = _local_hull(lower, points).area
            ratio = area_l / area_u
            if not (config.area_ratio_min <= ratio <= config.area_ratio_max):
                continue
            if not _hulls_overlap(upper, lower, points):
                continue
            drop.add(j)
    traversable = [s for k, s in enumerate(traversable) if k not in drop]
    return traversable, vertical


def _order_key(seg: PlaneSegment) -> tuple:
    c = seg.centroid
    return (-len(seg.indices), round(c[0], 6), round(c[1], 6), round(c[2], 6))


def extract_traversable_planes(
    cloud: PointCloud,
    config: ExtractionConfig | None = None,
    mapping: MappingConfig | None = None,
) -> list[TraversablePlane]:
    """Run the full extraction pipeline on a raw cloud.

    Preprocesses, segments, merges stairs and coplanar pieces, then
    builds each traversable plane's boundary polygons, neighbour
    crossing segments and grid map.
    """
    config = config or ExtractionConfig()
    mapping = mapping or MappingConfig()

    processed = preprocess(cloud, config)
    segments = region_growing(processed, config)
    segments = merge_stairs(segments, processed, config)
    traversable, vertical = merge_coplanar(segments, processed, config)
    if not traversable:
        raise NoTraversablePlane("no traversable plane found")

    traversable.sort(key=_order_key)
    points = processed.points

    planes: list[TraversablePlane] = []
    for i, seg in enumerate(traversable):
        local = seg.transform.to_local(points[seg.indices])[:, :2]
        boundary = convex_hull(local)
        planes.append(
            TraversablePlane(
                index=i,
                transform=seg.transform,
                inclination=seg.inclination,
                thickness=seg.thickness,
                kind=seg.kind,
                boundary=boundary,
                expanded_boundary=expand_polygon(boundary, config.expansion_margin),
                points_local=local,
            )
        )

    for i in range(len(planes)):
        for j in range(i + 1, len(planes)):
            segment = plane_polygon_intersection(
                planes[i],
                planes[j],
                margin=config.expansion_margin,
                min_length=config.min_interline_length,
            )
            if segment is not None:
                planes[i].neighbors[j] = segment
                planes[j].neighbors[i] = segment

    obstacle_points: list[np.ndarray] = []
    for seg in vertical:
        pts = points[seg.indices]
        local = seg.transform.to_local(pts)[:, :2]
        try:
            rim = alpha_shape_boundary(local, config.alpha)
        except Exception:
            rim = np.arange(len(pts))
        obstacle_points.append(pts[rim])

    def _grid(plane: TraversablePlane) -> GridMap:
        return build_grid(plane, planes, obstacle_points, mapping)

    workers = thread_count()
    if workers > 1 and len(planes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            grids = list(pool.map(_grid, planes))
    else:
        grids = [_grid(p) for p in planes]
    for plane, grid in zip(planes, grids):
        plane.grid = grid
    return planes
