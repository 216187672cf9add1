from __future__ import annotations

import numpy as np
import pytest

from planeway.errors import EmptyGrid
from planeway.geometry import Segment3D, Transform, convex_hull, expand_polygon, fit_plane
from planeway.mapping import (
    CellState,
    GridMap,
    MappingConfig,
    build_grid,
    compute_esdf,
    query_esdf,
    query_esdf_batch,
    supercover_cells,
)


def brute_force_esdf(states: np.ndarray, resolution: float) -> np.ndarray:
    """Oracle: exhaustive signed distance over cell centers."""
    obstacle = np.isin(states, (CellState.UNKNOWN, CellState.BOUNDARY, CellState.OCCUPIED))
    h, w = states.shape
    cap = resolution * (w + h)
    out = np.empty((h, w))
    ob = np.argwhere(obstacle)
    fr = np.argwhere(~obstacle)
    for j in range(h):
        for i in range(w):
            src = fr if obstacle[j, i] else ob
            if len(src) == 0:
                out[j, i] = -cap if obstacle[j, i] else cap
                continue
            d = resolution * np.hypot(src[:, 0] - j, src[:, 1] - i).min()
            out[j, i] = -d if obstacle[j, i] else d
    return out


def _grid_from_states(states: np.ndarray, resolution: float = 0.1) -> GridMap:
    h, w = states.shape
    return GridMap(resolution, np.zeros(2), w, h, states.astype(np.uint8))


def _random_states(rng, shape=(20, 20), p_obstacle=0.25) -> np.ndarray:
    states = np.full(shape, CellState.SAFE, dtype=np.uint8)
    mask = rng.random(shape) < p_obstacle
    states[mask] = CellState.OCCUPIED
    return states


class TestEsdf:
    def test_single_obstacle_matches_closed_form(self):
        states = np.full((9, 9), CellState.SAFE, dtype=np.uint8)
        states[4, 4] = CellState.OCCUPIED
        grid = _grid_from_states(states)
        esdf = compute_esdf(grid)
        jj, ii = np.meshgrid(np.arange(9), np.arange(9), indexing="ij")
        expected = 0.1 * np.hypot(jj - 4, ii - 4)
        expected[4, 4] = -0.1  # nearest free cell is one step away
        np.testing.assert_allclose(esdf, expected, atol=1e-12)

    def test_all_obstacle_grid_is_non_positive(self):
        states = np.full((6, 8), CellState.UNKNOWN, dtype=np.uint8)
        esdf = compute_esdf(_grid_from_states(states))
        assert (esdf <= 0.0).all()

    def test_matches_brute_force_on_random_grids(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            states = _random_states(rng, shape=(15, 17))
            grid = _grid_from_states(states)
            esdf = compute_esdf(grid)
            np.testing.assert_allclose(esdf, brute_force_esdf(states, 0.1), atol=1e-9)

    def test_adding_obstacle_never_raises_esdf(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            states = _random_states(rng, shape=(12, 12), p_obstacle=0.15)
            before = compute_esdf(_grid_from_states(states))
            free = np.argwhere(states == CellState.SAFE)
            j, i = free[rng.integers(len(free))]
            harder = states.copy()
            harder[j, i] = CellState.OCCUPIED
            after = compute_esdf(_grid_from_states(harder))
            assert (after <= before + 1e-12).all()


class TestEsdfQuery:
    def _grid(self):
        rng = np.random.default_rng(3)
        states = _random_states(rng, shape=(18, 18), p_obstacle=0.2)
        grid = _grid_from_states(states)
        grid.esdf = compute_esdf(grid)
        return grid

    def test_cell_centers_reproduce_esdf(self):
        grid = self._grid()
        xs = grid.origin[0] + np.arange(grid.width) * grid.resolution
        ys = grid.origin[1] + np.arange(grid.height) * grid.resolution
        for j in (0, 5, 17):
            vals, _, _ = query_esdf_batch(grid, xs, np.full_like(xs, ys[j]))
            np.testing.assert_allclose(vals, grid.esdf[j], atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        grid = self._grid()
        rng = np.random.default_rng(11)
        h = 1e-7
        checked = 0
        while checked < 100:
            # keep probes away from cell-center lines where bilinear kinks live
            ij = rng.uniform(0.15, 0.85, size=2) + rng.integers(1, 15, size=2)
            x = grid.origin[0] + ij[0] * grid.resolution
            y = grid.origin[1] + ij[1] * grid.resolution
            sample = query_esdf(grid, x, y)
            fx = (query_esdf(grid, x + h, y).value - query_esdf(grid, x - h, y).value) / (2 * h)
            fy = (query_esdf(grid, x, y + h).value - query_esdf(grid, x, y - h).value) / (2 * h)
            np.testing.assert_allclose(sample.gradient, [fx, fy], atol=1e-5)
            checked += 1

    def test_outside_pulls_back_toward_grid(self):
        grid = self._grid()
        x_edge = grid.origin[0]
        y_mid = grid.origin[1] + 8 * grid.resolution
        border = query_esdf(grid, x_edge, y_mid).value
        away = query_esdf(grid, x_edge - 0.5, y_mid)
        assert away.value == pytest.approx(border - 0.5, abs=1e-12)
        assert away.gradient[0] == pytest.approx(1.0)  # points back toward the grid
        corner = query_esdf(grid, x_edge - 0.3, grid.origin[1] - 0.4)
        np.testing.assert_allclose(corner.gradient, [0.6, 0.8], atol=1e-12)


class TestSupercover:
    def test_diagonal_has_no_gaps(self):
        grid = GridMap(1.0, np.zeros(2), 10, 10, np.zeros((10, 10), np.uint8))
        cells = supercover_cells(grid, (0.0, 0.0), (6.0, 4.0))
        cells = sorted(cells)
        assert (0, 0) in cells and (6, 4) in cells
        # 4-connectivity: every cell has a 4-neighbor in the set (except singletons)
        cs = set(cells)
        for ix, iy in cells:
            assert any(
                (ix + dx, iy + dy) in cs for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
            )

    def test_axis_aligned(self):
        grid = GridMap(1.0, np.zeros(2), 10, 10, np.zeros((10, 10), np.uint8))
        cells = supercover_cells(grid, (2.0, 3.0), (7.0, 3.0))
        assert cells == {(i, 3) for i in range(2, 8)}


class _Plane:
    """Minimal stand-in carrying the fields build_grid needs."""

    def __init__(self, points_world: np.ndarray, margin: float = 0.25):
        self.transform, self.inclination, _ = fit_plane(points_world)
        local = self.transform.to_local(points_world)
        self.points_local = local[:, :2]
        self.boundary = convex_hull(self.points_local)
        self.expanded_boundary = expand_polygon(self.boundary, margin)
        self.neighbors: dict[int, Segment3D] = {}


def _floor_and_ramp():
    # ramp climbing out of the floor interior, like a ramp up to a platform
    xs = np.linspace(0.0, 4.0, 81)
    ys = np.linspace(0.0, 3.0, 61)
    gx, gy = np.meshgrid(xs, ys)
    floor = _Plane(np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)]))

    ry = np.linspace(1.5, 2.9, 29)
    rx = np.linspace(1.0, 2.6, 33)
    gx, gy = np.meshgrid(rx, ry)
    slope = np.tan(np.radians(25.0))
    ramp = _Plane(np.column_stack([gx.ravel(), gy.ravel(), slope * (gy.ravel() - 1.5)]))

    from planeway.geometry import plane_polygon_intersection

    seg = plane_polygon_intersection(floor, ramp, margin=0.25)
    assert seg is not None
    floor.neighbors = {1: seg}
    ramp.neighbors = {0: seg}
    return floor, ramp, seg


class TestBuildGrid:
    def test_floor_meeting_ramp(self):
        floor, ramp, seg = _floor_and_ramp()
        cfg = MappingConfig()
        grid = build_grid(floor, [floor, ramp], [], cfg)

        # crossing preserved: interline cells along the shared segment
        mid = 0.5 * (seg.a + seg.b)
        local = floor.transform.to_local(mid)
        assert grid.state_at(local[0], local[1]) == CellState.INTERLINE

        # uphill side of the ramp footprint is Overlap (or its Boundary rim),
        # never Safe, and floor away from the ramp stays Safe
        up = floor.transform.to_local(mid + np.array([0.0, 0.6, np.tan(np.radians(25.0)) * 0.6]))
        assert grid.state_at(up[0], up[1]) in (CellState.OVERLAP, CellState.BOUNDARY)
        clear = floor.transform.to_local(np.array([0.5, 0.5, 0.0]))
        assert grid.state_at(clear[0], clear[1]) == CellState.SAFE

        ramp_grid = build_grid(ramp, [floor, ramp], [], cfg)
        assert (ramp_grid.states == CellState.SAFE).any()
        mid_ramp = ramp.transform.to_local(mid)
        assert ramp_grid.state_at(mid_ramp[0], mid_ramp[1]) == CellState.INTERLINE

    def test_boundary_cells_are_overlap_rim(self):
        floor, ramp, _ = _floor_and_ramp()
        grid = build_grid(floor, [floor, ramp], [], MappingConfig())
        boundary = np.argwhere(grid.states == CellState.BOUNDARY)
        assert len(boundary) > 0
        safe = grid.states == CellState.SAFE
        for j, i in boundary:
            patch = safe[max(0, j - 1) : j + 2, max(0, i - 1) : i + 2]
            assert patch.any()

    def test_wall_stamps_occupied_band(self):
        floor, ramp, _ = _floor_and_ramp()
        # wall along x = 2 rising from the floor
        ys = np.linspace(0.5, 2.5, 41)
        zs = np.linspace(0.0, 1.2, 25)
        gy, gz = np.meshgrid(ys, zs)
        wall_pts = np.column_stack([np.full(gy.size, 2.0), gy.ravel(), gz.ravel()])
        foot = wall_pts[wall_pts[:, 2] < 0.02]
        grid = build_grid(floor, [floor, ramp], [foot], MappingConfig())
        local = floor.transform.to_local(np.array([2.0, 0.8, 0.0]))
        assert grid.state_at(local[0], local[1]) == CellState.OCCUPIED
        near = floor.transform.to_local(np.array([2.15, 0.8, 0.0]))
        assert grid.state_at(near[0], near[1]) == CellState.OCCUPIED
        far = floor.transform.to_local(np.array([2.6, 0.8, 0.0]))
        assert grid.state_at(far[0], far[1]) == CellState.SAFE

    def test_tall_wall_points_above_clearance_ignored(self):
        floor, ramp, _ = _floor_and_ramp()
        overhang = np.column_stack(
            [np.full(20, 2.0), np.linspace(0.5, 2.5, 20), np.full(20, 1.6)]
        )
        grid = build_grid(floor, [floor, ramp], [overhang], MappingConfig())
        assert not (grid.states == CellState.OCCUPIED).any()

    def test_empty_grid_raises(self):
        floor, ramp, _ = _floor_and_ramp()
        bare = _Plane(np.column_stack([np.random.default_rng(0).uniform(0, 1, (50, 2)),
                                       np.zeros(50)]))
        bare.points_local = np.empty((0, 2))
        with pytest.raises(EmptyGrid):
            build_grid(bare, [bare], [], MappingConfig())


class TestStateText:
    def test_round_trip(self):
        rng = np.random.default_rng(5)
        states = rng.integers(0, 6, size=(7, 9)).astype(np.uint8)
        grid = _grid_from_states(states)
        text = grid.states_text()
        assert len(text) == 63
        back = GridMap.states_from_text(text, 9, 7)
        np.testing.assert_array_equal(back, states)
