"""Extraction pipeline tests on small synthetic clouds.

Clouds here are noise-free lattices, so segmentation results are exact
and the expected plane parameters can be computed in closed form.
"""

from __future__ import annotations

import numpy as np
import pytest

from planeway.errors import EmptyCloud, NoTraversablePlane
from planeway.extraction import (
    ExtractionConfig,
    PlaneKind,
    PlaneSegment,
    PointCloud,
    extract_traversable_planes,
    merge_coplanar,
    merge_stairs,
    preprocess,
    region_growing,
    thread_count,
)
from planeway.geometry import fit_plane


def _patch(x0, x1, y0, y1, z_fn, spacing=0.03):
    """Lattice over [x0,x1] x [y0,y1] with z = z_fn(x, y)."""
    nx = max(2, int(round((x1 - x0) / spacing)) + 1)
    ny = max(2, int(round((y1 - y0) / spacing)) + 1)
    gx, gy = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    x, y = gx.ravel(), gy.ravel()
    return np.column_stack([x, y, z_fn(x, y)])


def _vertical_patch(axis_val, u0, u1, z0, z1, axis="x", spacing=0.03):
    """Lattice on a vertical plane x=axis_val (or y=axis_val)."""
    nu = max(2, int(round((u1 - u0) / spacing)) + 1)
    nz = max(2, int(round((z1 - z0) / spacing)) + 1)
    gu, gz = np.meshgrid(np.linspace(u0, u1, nu), np.linspace(z0, z1, nz))
    u, z = gu.ravel(), gz.ravel()
    if axis == "x":
        return np.column_stack([np.full_like(u, axis_val), u, z])
    return np.column_stack([u, np.full_like(u, axis_val), z])


def _flat(z):
    return lambda x, y: np.full_like(x, z)


def _segment_for(points, lo, hi, config=None):
    """PlaneSegment over a contiguous index range of ``points``."""
    idx = np.arange(lo, hi)
    transform, incl, thick = fit_plane(points[idx])
    config = config or ExtractionConfig()
    deg = np.degrees(incl)
    if deg >= config.traversable_max_inclination_deg:
        kind = PlaneKind.VERTICAL
    elif deg < config.ground_max_inclination_deg:
        kind = PlaneKind.GROUND
    else:
        kind = PlaneKind.SLOPE
    return PlaneSegment(idx, transform, incl, thick, kind)


class TestPreprocess:
    def test_duplicates_collapse(self):
        floor = _patch(0, 2, 0, 2, _flat(0.0))
        once = preprocess(PointCloud(np.vstack([floor])))
        twice = preprocess(PointCloud(np.vstack([floor, floor])))
        assert len(once) == len(twice)

    def test_outlier_removed(self):
        floor = _patch(0, 2, 0, 2, _flat(0.0))
        cloud = np.vstack([floor, [[1.0, 1.0, 5.0]]])
        out = preprocess(PointCloud(cloud))
        assert out.points[:, 2].max() < 1.0

    def test_normals_unit_and_oriented(self):
        floor = _patch(0, 2, 0, 2, _flat(0.0))
        out = preprocess(PointCloud(floor))
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-9)
        assert (out.normals[:, 2] > 0.99).all()

    def test_wall_normals_face_plus_x(self):
        wall = _vertical_patch(1.0, 0.0, 2.0, 0.0, 2.0, axis="x")
        out = preprocess(PointCloud(wall))
        assert (np.abs(out.normals[:, 0]) > 0.99).all()
        assert (out.normals[:, 0] > 0).all()

    def test_repeated_single_point_raises(self):
        with pytest.raises(EmptyCloud):
            preprocess(PointCloud(np.tile([1.0, 2.0, 3.0], (100, 1))))

    def test_empty_raises(self):
        with pytest.raises(EmptyCloud):
            preprocess(PointCloud(np.zeros((0, 3))))


class TestRegionGrowing:
    def test_perpendicular_planes_stay_pure(self):
        floor = _patch(0, 4, 0, 3, _flat(0.0))
        wall = _vertical_patch(2.0, 0.0, 3.0, 0.0, 1.5, axis="x")
        points = np.vstack([floor, wall])
        is_wall = np.zeros(len(points), dtype=bool)
        is_wall[len(floor):] = True
        # points on the fold line itself belong to both surfaces
        ambiguous = np.hypot(points[:, 0] - 2.0, points[:, 2]) < 0.06

        segments = region_growing(PointCloud(points))
        assert len(segments) >= 2
        for seg in segments:
            labels = is_wall[seg.indices]
            clear = ~ambiguous[seg.indices]
            assert labels[clear].all() or not labels[clear].any()

        kinds = sorted(s.kind.value for s in segments)
        assert "ground" in kinds and "vertical" in kinds

    def test_floor_and_ramp_split(self):
        floor = _patch(0, 3, 0, 1, _flat(0.0))
        slope = np.tan(np.radians(25.0))
        ramp = _patch(0, 3, 1, 2, lambda x, y: slope * (y - 1.0))
        segments = region_growing(PointCloud(np.vstack([floor, ramp])))
        incls = sorted(np.degrees(s.inclination) for s in segments)
        assert len(segments) == 2
        assert incls[0] == pytest.approx(0.0, abs=0.5)
        assert incls[1] == pytest.approx(25.0, abs=0.5)
        kinds = {s.kind for s in segments}
        assert kinds == {PlaneKind.GROUND, PlaneKind.SLOPE}

    def test_small_patch_discarded(self):
        floor = _patch(0, 2, 0, 2, _flat(0.0))
        crumb = _patch(5.0, 5.12, 5.0, 5.12, _flat(0.3))  # 25 points
        assert len(crumb) < 50
        segments = region_growing(PointCloud(np.vstack([floor, crumb])))
        assert len(segments) == 1
        assert len(segments[0].indices) >= len(floor) - 4


class TestMergeStairs:
    RUN = 0.28
    RISE = 0.17

    def _staircase(self, n_treads=5, width=1.2, spacing=0.025):
        parts = [
            _patch(
                0.0,
                width,
                k * self.RUN,
                (k + 1) * self.RUN,
                _flat((k + 1) * self.RISE),
                spacing,
            )
            for k in range(n_treads)
        ]
        risers = [
            _vertical_patch(
                k * self.RUN, 0.0, width, k * self.RISE, (k + 1) * self.RISE,
                axis="y", spacing=spacing,
            )
            for k in range(n_treads)
        ]
        return np.vstack(parts + risers)

    def test_five_step_staircase_merges(self):
        cloud = PointCloud(self._staircase())
        segments = region_growing(cloud)
        treads = [s for s in segments if np.degrees(s.inclination) < 15]
        assert len(treads) == 5

        merged = merge_stairs(segments, cloud)
        stairs = [s for s in merged if s.kind is PlaneKind.STAIRS]
        assert len(stairs) == 1
        # least-squares pitch over m uniformly sampled treads:
        # atan((rise/run) * (1 - 1/m^2))
        expected = np.degrees(np.arctan(self.RISE / self.RUN * (1 - 1 / 25)))
        assert np.degrees(stairs[0].inclination) == pytest.approx(expected, abs=1.0)
        # risers sit inside the merged extent and must be gone
        assert not any(s.kind is PlaneKind.VERTICAL for s in merged)

    def test_merged_plane_covers_all_treads(self):
        cloud = PointCloud(self._staircase())
        segments = region_growing(cloud)
        treads = [s for s in segments if np.degrees(s.inclination) < 15]
        merged = merge_stairs(segments, cloud)
        stairs = next(s for s in merged if s.kind is PlaneKind.STAIRS)
        tread_points = np.concatenate([t.indices for t in treads])
        assert set(tread_points).issubset(set(stairs.indices))

    def test_single_step_not_merged(self):
        floor = _patch(0, 2, 0, 2, _flat(0.0))
        step = _patch(0.4, 1.6, 2.0, 2.3, _flat(0.17))
        cloud = PointCloud(np.vstack([floor, step]))
        segments = region_growing(cloud)
        merged = merge_stairs(segments, cloud)
        assert len(merged) == len(segments)
        assert not any(s.merged for s in merged)

    def test_irregular_rise_breaks_chain(self):
        pts = np.vstack(
            [
                _patch(0.0, 1.2, 0.00, 0.28, _flat(0.17)),
                _patch(0.0, 1.2, 0.28, 0.56, _flat(0.34)),
                _patch(0.0, 1.2, 0.56, 0.84, _flat(0.51)),
                _patch(0.0, 1.2, 0.84, 1.12, _flat(0.81)),  # rise jumps to 0.30
            ]
        )
        cloud = PointCloud(pts)
        n = len(pts) // 4
        segments = [_segment_for(pts, k * n, (k + 1) * n) for k in range(4)]
        merged = merge_stairs(segments, cloud)
        stairs = [s for s in merged if s.merged]
        assert len(stairs) == 1
        assert len(stairs[0].indices) == 3 * n
        plain = [s for s in merged if not s.merged]
        assert len(plain) == 1 and len(plain[0].indices) == n

    def test_distant_tread_not_chained(self):
        pts = np.vstack(
            [
                _patch(0.0, 1.2, 0.00, 0.28, _flat(0.17)),
                _patch(3.0, 4.2, 0.50, 0.78, _flat(0.34)),
            ]
        )
        cloud = PointCloud(pts)
        n = len(pts) // 2
        segments = [_segment_for(pts, 0, n), _segment_for(pts, n, 2 * n)]
        assert merge_stairs(segments, cloud) == segments

    def test_riser_outside_extent_kept(self):
        tread_a = _patch(0.0, 1.2, 0.00, 0.28, _flat(0.17))
        tread_b = _patch(0.0, 1.2, 0.28, 0.56, _flat(0.34))
        wall = _vertical_patch(3.0, 0.0, 1.0, 0.0, 1.0, axis="y", spacing=0.03)
        pts = np.vstack([tread_a, tread_b, wall])
        cloud = PointCloud(pts)
        na, nb = len(tread_a), len(tread_b)
        segments = [
            _segment_for(pts, 0, na),
            _segment_for(pts, na, na + nb),
            _segment_for(pts, na + nb, len(pts)),
        ]
        merged = merge_stairs(segments, cloud)
        assert any(s.kind is PlaneKind.VERTICAL for s in merged)
        assert any(s.merged for s in merged)


class TestMergeCoplanar:
    def test_overlapping_coplanar_merge(self):
        a = _patch(0.0, 2.2, 0.0, 2.0, _flat(0.0))
        b = _patch(1.8, 4.0, 0.0, 2.0, _flat(0.0))
        pts = np.vstack([a, b])
        cloud = PointCloud(pts)
        segments = [_segment_for(pts, 0, len(a)), _segment_for(pts, len(a), len(pts))]
        traversable, vertical = merge_coplanar(segments, cloud)
        assert len(traversable) == 1 and not vertical
        assert len(traversable[0].indices) == len(pts)

    def test_disjoint_coplanar_not_merged(self):
        a = _patch(0.0, 2.0, 0.0, 2.0, _flat(0.0))
        b = _patch(5.0, 7.0, 0.0, 2.0, _flat(0.0))
        pts = np.vstack([a, b])
        cloud = PointCloud(pts)
        segments = [_segment_for(pts, 0, len(a)), _segment_for(pts, len(a), len(pts))]
        traversable, _ = merge_coplanar(segments, cloud)
        assert len(traversable) == 2

    def test_tilted_overlap_not_merged(self):
        a = _patch(0.0, 2.0, 0.0, 2.0, _flat(0.0))
        # same footprint, 12-degree tilt about the shared centerline
        slope = np.tan(np.radians(12.0))
        b = _patch(0.0, 2.0, 0.0, 2.0, lambda x, y: slope * (y - 1.0))
        b[:, 2] += 0.02
        pts = np.vstack([a, b])
        cloud = PointCloud(pts)
        segments = [_segment_for(pts, 0, len(a)), _segment_for(pts, len(a), len(pts))]
        traversable, _ = merge_coplanar(segments, cloud)
        assert len(traversable) == 2

    def test_underside_sheet_removed(self):
        top = _patch(0.0, 3.0, 0.0, 2.0, _flat(0.0))
        under = _patch(0.0, 3.0, 0.0, 2.0, _flat(-0.06))
        pts = np.vstack([top, under])
        cloud = PointCloud(pts)
        segments = [
            _segment_for(pts, 0, len(top)),
            _segment_for(pts, len(top), len(pts)),
        ]
        traversable, _ = merge_coplanar(segments, cloud)
        assert len(traversable) == 1
        assert traversable[0].centroid[2] == pytest.approx(0.0, abs=1e-9)

    def test_small_lower_surface_kept(self):
        top = _patch(0.0, 3.0, 0.0, 2.0, _flat(0.0))
        small = _patch(1.0, 2.0, 0.5, 1.5, _flat(-0.06))  # area ratio 1/6
        pts = np.vstack([top, small])
        cloud = PointCloud(pts)
        segments = [
            _segment_for(pts, 0, len(top)),
            _segment_for(pts, len(top), len(pts)),
        ]
        traversable, _ = merge_coplanar(segments, cloud)
        assert len(traversable) == 2


def _ramp_world() -> PointCloud:
    """Floor, 25-degree ramp and upper platform in a strip."""
    slope = np.tan(np.radians(25.0))
    top = slope * 1.0
    floor = _patch(0.0, 3.0, 0.0, 1.0, _flat(0.0))
    ramp = _patch(0.9, 2.1, 1.0, 2.0, lambda x, y: slope * (y - 1.0), spacing=0.025)
    platform = _patch(0.0, 3.0, 2.0, 3.0, _flat(top))
    return PointCloud(np.vstack([floor, ramp, platform]))


class TestExtract:
    def test_ramp_world_planes_and_neighbors(self):
        planes = extract_traversable_planes(_ramp_world())
        assert len(planes) == 3
        assert [p.index for p in planes] == [0, 1, 2]

        by_kind = {}
        for p in planes:
            by_kind.setdefault(p.kind, []).append(p)
        assert len(by_kind[PlaneKind.SLOPE]) == 1
        ramp = by_kind[PlaneKind.SLOPE][0]
        floors = by_kind[PlaneKind.GROUND]
        assert len(floors) == 2

        # the ramp touches both floors, the floors never touch each other
        assert set(ramp.neighbors) == {f.index for f in floors}
        for f in floors:
            assert set(f.neighbors) == {ramp.index}

        for p in planes:
            assert p.grid is not None and p.grid.esdf is not None

    def test_ordering_by_point_count(self):
        planes = extract_traversable_planes(_ramp_world())
        counts = [len(p.points_local) for p in planes]
        assert counts == sorted(counts, reverse=True)

    def test_crossing_segment_on_fold_line(self):
        planes = extract_traversable_planes(_ramp_world())
        ramp = next(p for p in planes if p.kind is PlaneKind.SLOPE)
        lower = next(
            p for p in planes
            if p.kind is PlaneKind.GROUND and abs(p.transform.translation[2]) < 0.1
        )
        seg = ramp.neighbors[lower.index]
        np.testing.assert_allclose(seg.a[1], 1.0, atol=0.02)
        np.testing.assert_allclose(seg.b[1], 1.0, atol=0.02)
        np.testing.assert_allclose([seg.a[2], seg.b[2]], 0.0, atol=0.02)

    def test_heading_offset_of_ramp_points_uphill(self):
        planes = extract_traversable_planes(_ramp_world())
        ramp = next(p for p in planes if p.kind is PlaneKind.SLOPE)
        assert ramp.heading_offset == pytest.approx(np.pi / 2, abs=0.02)

    def test_wall_only_cloud_raises(self):
        wall = _vertical_patch(0.0, 0.0, 3.0, 0.0, 2.0, axis="x", spacing=0.025)
        with pytest.raises(NoTraversablePlane):
            extract_traversable_planes(PointCloud(wall))

    def test_deterministic(self):
        a = extract_traversable_planes(_ramp_world())
        b = extract_traversable_planes(_ramp_world())
        assert len(a) == len(b)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.transform.rotation, pb.transform.rotation)
            np.testing.assert_array_equal(
                pa.transform.translation, pb.transform.translation
            )
            np.testing.assert_array_equal(pa.grid.states, pb.grid.states)


class TestThreadCount:
    def test_default_is_one(self, monkeypatch):
        monkeypatch.delenv("PLANEWAY_THREADS", raising=False)
        assert thread_count() == 1

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("PLANEWAY_THREADS", "4")
        assert thread_count() == 4

    def test_garbage_falls_back(self, monkeypatch):
        monkeypatch.setenv("PLANEWAY_THREADS", "lots")
        assert thread_count() == 1
        monkeypatch.setenv("PLANEWAY_THREADS", "-3")
        assert thread_count() == 1
