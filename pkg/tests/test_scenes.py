"""Benchmark scene generators: determinism, density, labels, queries."""

import numpy as np
import pytest

from planeway.errors import ConfigError
from planeway.scenes import DENSITY, RISE, SCENE_NAMES, make_scene


class TestDeterminism:
    def test_same_seed_is_byte_identical(self):
        a = make_scene("planes", seed=7)
        b = make_scene("planes", seed=7)
        assert a.cloud.points.tobytes() == b.cloud.points.tobytes()
        assert a.truth.labels.tobytes() == b.truth.labels.tobytes()

    def test_different_seeds_differ(self):
        a = make_scene("planes", seed=1)
        b = make_scene("planes", seed=2)
        assert a.cloud.points.shape != b.cloud.points.shape or not np.array_equal(
            a.cloud.points, b.cloud.points
        )

    def test_default_seed_matches_explicit(self):
        assert np.array_equal(make_scene("platform").cloud.points,
                              make_scene("platform", seed=1).cloud.points)


class TestSampling:
    def test_point_count_tracks_surface_area(self):
        # planes scene: two floors, one ramp, two five-step staircases
        ramp = 1.2 * float(np.hypot(1.4, 0.85))
        stairs = 2 * (5 * 1.2 * 0.17 + 5 * 1.2 * 0.28)
        area = 8.0 * 6.0 + 8.0 * 2.6 + ramp + stairs
        n = len(make_scene("planes").cloud.points)
        assert n == pytest.approx(DENSITY * area, rel=0.03)

    def test_labels_cover_every_point(self, scenes):
        for scene in scenes.values():
            assert len(scene.truth.labels) == len(scene.cloud.points)
            assert scene.truth.labels.max() == len(scene.truth.units) - 1

    def test_labelled_points_lie_on_their_surface(self, scenes):
        # flat and sloped units: within noise of the exact plane; stairs:
        # within tread-to-fitted-plane offset (~0.10) plus noise
        for scene in scenes.values():
            pts, labels = scene.cloud.points, scene.truth.labels
            for uid, unit in enumerate(scene.truth.units):
                dist = np.abs((pts[labels == uid] - unit.point) @ unit.normal)
                limit = 0.15 if unit.kind == "stairs" else 0.06
                assert dist.max() < limit, (scene.name, unit.name, dist.max())

    def test_stair_labels_sit_on_tread_heights(self):
        scene = make_scene("building")
        pts = scene.cloud.points[scene.truth.labels == 3]  # flight1, base z=0
        steps = pts[:, 2] / RISE
        assert np.abs(steps - np.round(steps)).max() < 0.4
        assert set(np.round(steps).astype(int)) == {1, 2, 3, 4}


class TestTruth:
    def test_links_are_ordered_unit_pairs(self, scenes):
        for scene in scenes.values():
            n = len(scene.truth.units)
            for i, j in scene.truth.links:
                assert 0 <= i < j < n

    def test_start_and_goal_lie_on_their_units(self, scenes):
        for scene in scenes.values():
            truth = scene.truth
            for point, uid in ((truth.start, truth.start_unit),
                               (truth.goal, truth.goal_unit)):
                unit = truth.units[uid]
                assert abs((point - unit.point) @ unit.normal) < 1e-9

    def test_normals_are_unit_length(self, scenes):
        for scene in scenes.values():
            for unit in scene.truth.units:
                assert np.linalg.norm(unit.normal) == pytest.approx(1.0, abs=1e-12)


def test_unknown_scene_rejected():
    with pytest.raises(ConfigError):
        make_scene("atrium")


def test_scene_names_all_build(scenes):
    assert set(scenes) == set(SCENE_NAMES)
    for name, scene in scenes.items():
        assert scene.name == name
        assert len(scene.cloud.points) > 10_000
