"""Per-plane occupancy grids and signed Euclidean distance fields.

Each traversable plane carries a grid in its own 2D coordinates. Cells hold
one of six states with precedence Occupied > Interline > Boundary > Overlap
> Safe > Unknown; the ESDF treats Unknown, Occupied and Boundary as
obstacles, so crossing corridors (Interline) and regions covered by a
neighboring plane (Overlap) stay free for clearance purposes even though
only Safe and Interline cells are drivable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .errors import EmptyGrid, OutOfDomain
from .geometry import ConvexPolygon2D, Segment3D, convex_hull

STATE_CODES = "USIOBX"


class CellState(IntEnum):
    UNKNOWN = 0
    SAFE = 1
    INTERLINE = 2
    OVERLAP = 3
    BOUNDARY = 4
    OCCUPIED = 5


OBSTACLE_STATES = (CellState.UNKNOWN, CellState.BOUNDARY, CellState.OCCUPIED)
TRAVERSABLE_STATES = (CellState.SAFE, CellState.INTERLINE)


@dataclass
class MappingConfig:
    resolution: float = 0.1
    clearance_height: float = 1.0
    safety_distance: float = 0.2
    interline_dilation_cells: int = 4
    overlap_band: float = 0.3
    occupied_min_height: float = -0.05
    pad_cells: int = 1


@dataclass
class GridMap:
    """Axis-aligned grid in plane coordinates; origin is the center of cell (0, 0)."""

    resolution: float
    origin: np.ndarray
    width: int
    height: int
    states: np.ndarray = field(repr=False)  # (height, width) uint8, indexed [iy, ix]
    esdf: np.ndarray | None = field(default=None, repr=False)

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.origin[0]) / self.resolution + 0.5))
        iy = int(math.floor((y - self.origin[1]) / self.resolution + 0.5))
        return ix, iy

    def cell_center(self, ix, iy) -> np.ndarray:
        return np.stack(
            [
                self.origin[0] + np.asarray(ix) * self.resolution,
                self.origin[1] + np.asarray(iy) * self.resolution,
            ],
            axis=-1,
        )

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def state_at(self, x: float, y: float) -> CellState:
        ix, iy = self.cell_index(x, y)
        if not self.in_bounds(ix, iy):
            return CellState.UNKNOWN
        return CellState(self.states[iy, ix])

    def is_traversable_cell(self, ix: int, iy: int, safety_distance: float) -> bool:
        if not self.in_bounds(ix, iy):
            return False
        if self.states[iy, ix] not in (CellState.SAFE, CellState.INTERLINE):
            return False
        return self.esdf is None or self.esdf[iy, ix] >= safety_distance

    def states_text(self) -> str:
        """Row-major single-character encoding of the state array."""
        lut = np.frombuffer(STATE_CODES.encode(), dtype=np.uint8)
        return lut[self.states.ravel()].tobytes().decode()

    @staticmethod
    def states_from_text(text: str, width: int, height: int) -> np.ndarray:
        raw = np.frombuffer(text.encode(), dtype=np.uint8)
        if raw.size != width * height:
            raise ValueError("state text length does not match grid shape")
        lut = np.full(256, 255, dtype=np.uint8)
        for value, code in enumerate(STATE_CODES):
            lut[ord(code)] = value
        states = lut[raw]
        if (states == 255).any():
            raise ValueError("state text contains an unknown code")
        return states.reshape(height, width)


@dataclass(frozen=True)
class EsdfSample:
    value: float
    gradient: np.ndarray


def supercover_cells(grid: GridMap, p0, p1) -> set[tuple[int, int]]:
    """All cells a segment passes through (4-connected supercover), unclipped."""
    res = grid.resolution
    x0 = (p0[0] - grid.origin[0]) / res
    y0 = (p0[1] - grid.origin[1]) / res
    x1 = (p1[0] - grid.origin[0]) / res
    y1 = (p1[1] - grid.origin[1]) / res
    dx, dy = x1 - x0, y1 - y0
    ix, iy = round(x0), round(y0)
    ix1, iy1 = round(x1), round(y1)
    cells = {(ix, iy)}
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    for _ in range(2 * (abs(ix1 - ix) + abs(iy1 - iy)) + 4):
        if (ix, iy) == (ix1, iy1):
            break
        tx = ((ix + 0.5 * step_x) - x0) / dx if dx != 0.0 else math.inf
        ty = ((iy + 0.5 * step_y) - y0) / dy if dy != 0.0 else math.inf
        if abs(tx - ty) < 1e-12:
            cells.add((ix + step_x, iy))
            cells.add((ix, iy + step_y))
            ix += step_x
            iy += step_y
        elif tx < ty:
            ix += step_x
        else:
            iy += step_y
        cells.add((ix, iy))
    return cells


def _disk_offsets(radius_cells: float) -> np.ndarray:
    r = int(math.ceil(radius_cells))
    dx, dy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    keep = dx * dx + dy * dy <= radius_cells * radius_cells + 1e-9
    return np.column_stack([dx[keep], dy[keep]])


def build_grid(plane, all_traversable, vertical_boundary_points, config: MappingConfig) -> GridMap:
    """Rasterize one plane into a state grid and attach its signed ESDF.

    ``plane`` needs transform, boundary, expanded_boundary, points_local and
    neighbors (mapping of index into ``all_traversable`` to Segment3D).
    ``vertical_boundary_points`` is a list of (N, 3) world-coordinate arrays,
    one per vertical plane, holding alpha-shape boundary points.
    """
    res = config.resolution
    xmin, ymin, xmax, ymax = plane.expanded_boundary.bounds()
    pad = config.pad_cells
    origin = np.array([xmin - pad * res, ymin - pad * res])
    width = int(math.floor((xmax - origin[0]) / res)) + 1 + pad
    height = int(math.floor((ymax - origin[1]) / res)) + 1 + pad
    states = np.full((height, width), CellState.UNKNOWN, dtype=np.uint8)
    grid = GridMap(res, origin, width, height, states)

    cx = origin[0] + np.arange(width) * res
    cy = origin[1] + np.arange(height) * res
    gx, gy = np.meshgrid(cx, cy)
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    centers_world = plane.transform.to_world(
        np.column_stack([centers, np.zeros(len(centers))])
    )
    inside_own = plane.boundary.contains_points(centers).reshape(height, width)

    # Safe: at least one of the plane's own points projects into the cell
    pts = np.asarray(plane.points_local)
    if len(pts):
        ix = np.floor((pts[:, 0] - origin[0]) / res + 0.5).astype(int)
        iy = np.floor((pts[:, 1] - origin[1]) / res + 0.5).astype(int)
        ok = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
        states[iy[ok], ix[ok]] = CellState.SAFE

    # Overlap: covered by a neighbor that is higher, or slightly lower just
    # beyond this plane's own hull (the apron crossed when descending)
    own_z = centers_world[:, 2].reshape(height, width)
    for j in plane.neighbors:
        nbr = all_traversable[j]
        nbr_vertices_world = nbr.transform.to_world(
            np.column_stack(
                [nbr.expanded_boundary.vertices, np.zeros(len(nbr.expanded_boundary.vertices))]
            )
        )
        proj = plane.transform.to_local(nbr_vertices_world)[:, :2]
        try:
            footprint = convex_hull(proj)
        except Exception:
            continue
        inside_nbr = footprint.contains_points(centers).reshape(height, width)
        if not inside_nbr.any():
            continue
        nbr_z = nbr.transform.surface_world_z(
            centers_world[:, 0], centers_world[:, 1]
        ).reshape(height, width)
        higher = nbr_z > own_z + 1e-6
        apron = (~inside_own) & (nbr_z > own_z - config.overlap_band)
        mask = inside_nbr & (higher | apron)
        mask &= (states == CellState.UNKNOWN) | (states == CellState.SAFE)
        states[mask] = CellState.OVERLAP

    # Interline: supercover of every crossing segment, dilated so the
    # corridor survives rasterization and reaches point-supported cells
    line_mask = np.zeros_like(states, dtype=bool)
    for segment in plane.neighbors.values():
        a = plane.transform.to_local(segment.a)[:2]
        b = plane.transform.to_local(segment.b)[:2]
        for ix_c, iy_c in supercover_cells(grid, a, b):
            if grid.in_bounds(ix_c, iy_c):
                line_mask[iy_c, ix_c] = True
    if line_mask.any() and config.interline_dilation_cells > 0:
        offs = _disk_offsets(config.interline_dilation_cells)
        structure = np.zeros(
            (2 * config.interline_dilation_cells + 1,) * 2, dtype=bool
        )
        structure[
            offs[:, 1] + config.interline_dilation_cells,
            offs[:, 0] + config.interline_dilation_cells,
        ] = True
        line_mask = ndimage.binary_dilation(line_mask, structure=structure)
    states[line_mask] = CellState.INTERLINE

    # Boundary: overlap rim cells touching Safe (drop-off edges become obstacles)
    safe = states == CellState.SAFE
    near_safe = ndimage.binary_dilation(safe, structure=np.ones((3, 3), dtype=bool))
    rim = (states == CellState.OVERLAP) & near_safe
    states[rim] = CellState.BOUNDARY

    # Occupied: vertical-plane boundary points close above the surface
    offs = _disk_offsets(config.safety_distance / res)
    for boundary_points in vertical_boundary_points:
        if len(boundary_points) == 0:
            continue
        local = plane.transform.to_local(np.asarray(boundary_points))
        keep = (local[:, 2] >= config.occupied_min_height) & (
            local[:, 2] <= config.clearance_height
        )
        for px, py in local[keep, :2]:
            ix0, iy0 = grid.cell_index(px, py)
            ix = offs[:, 0] + ix0
            iy = offs[:, 1] + iy0
            ok = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
            ix, iy = ix[ok], iy[ok]
            d2 = (cx[ix] - px) ** 2 + (cy[iy] - py) ** 2
            close = d2 <= config.safety_distance**2 + 1e-12
            states[iy[close], ix[close]] = CellState.OCCUPIED

    if not (states == CellState.SAFE).any():
        raise EmptyGrid("plane grid has no Safe cell")

    grid.esdf = compute_esdf(grid)
    return grid


def compute_esdf(grid: GridMap) -> np.ndarray:
    """Signed exact Euclidean distance field over cell centers.

    Free cells carry +distance to the nearest obstacle cell center, obstacle
    cells -distance to the nearest free cell center. Obstacles are Unknown,
    Occupied and Boundary cells.
    """
    res = grid.resolution
    obstacle = np.isin(grid.states, np.asarray(OBSTACLE_STATES, dtype=np.uint8))
    cap = res * (grid.width + grid.height)
    if obstacle.all():
        return np.full(grid.states.shape, -cap)
    if not obstacle.any():
        return np.full(grid.states.shape, cap)
    outside = ndimage.distance_transform_edt(~obstacle, sampling=res)
    inside = ndimage.distance_transform_edt(obstacle, sampling=res)
    return np.where(obstacle, -inside, outside)


def query_esdf(grid: GridMap, x: float, y: float) -> EsdfSample:
    value, gx, gy = _query_esdf_arrays(grid, np.array([x]), np.array([y]))
    return EsdfSample(float(value[0]), np.array([gx[0], gy[0]]))


def query_esdf_batch(grid: GridMap, x: np.ndarray, y: np.ndarray):
    """Vectorized ESDF interpolation: returns (values, dvalue_dx, dvalue_dy)."""
    return _query_esdf_arrays(grid, np.asarray(x, dtype=float), np.asarray(y, dtype=float))


def _query_esdf_arrays(grid: GridMap, x: np.ndarray, y: np.ndarray):
    if grid.esdf is None:
        raise OutOfDomain("grid has no ESDF")
    res = grid.resolution
    u = (x - grid.origin[0]) / res
    v = (y - grid.origin[1]) / res
    uc = np.clip(u, 0.0, grid.width - 1.0)
    vc = np.clip(v, 0.0, grid.height - 1.0)

    i0 = np.clip(np.floor(uc).astype(int), 0, grid.width - 2)
    j0 = np.clip(np.floor(vc).astype(int), 0, grid.height - 2)
    fx = uc - i0
    fy = vc - j0
    e = grid.esdf
    c00 = e[j0, i0]
    c10 = e[j0, i0 + 1]
    c01 = e[j0 + 1, i0]
    c11 = e[j0 + 1, i0 + 1]
    value = (
        (1 - fx) * (1 - fy) * c00
        + fx * (1 - fy) * c10
        + (1 - fx) * fy * c01
        + fx * fy * c11
    )
    gx = ((1 - fy) * (c10 - c00) + fy * (c11 - c01)) / res
    gy = ((1 - fx) * (c01 - c00) + fx * (c11 - c10)) / res

    # outside the cell-center rectangle: pull back toward the border
    du = (u - uc) * res
    dv = (v - vc) * res
    dist = np.hypot(du, dv)
    outside = dist > 0.0
    if outside.any():
        value = value - dist
        with np.errstate(invalid="ignore", divide="ignore"):
            gx = np.where(outside, np.where(du != 0.0, -du / np.maximum(dist, 1e-30), gx), gx)
            gy = np.where(outside, np.where(dv != 0.0, -dv / np.maximum(dist, 1e-30), gy), gy)
    return value, gx, gy
