"""Synthetic benchmark scenes with exact ground truth.

Each scene is assembled from rectangular patches (floors, ramps, stair
treads and risers, walls). Points are sampled with a Poisson count per
patch at a fixed surface density, then perturbed along the patch normal.
The ground truth records the walkable units the extractor should
recover, the adjacency between them, a per-point unit label and a
start/goal query for the planner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .extraction import PointCloud
from .geometry import fit_plane

DENSITY = 600.0  # points per square meter
NOISE_SIGMA = 0.01
DEFAULT_SEED = 1

RISE = 0.17
RUN = 0.28

SCENE_NAMES = ("planes", "platform", "multilayer", "building")


@dataclass(frozen=True)
class GroundTruthUnit:
    """One walkable surface the extractor is expected to produce."""

    name: str
    kind: str  # ground | slope | stairs
    normal: np.ndarray
    point: np.ndarray


@dataclass
class SceneTruth:
    units: list[GroundTruthUnit]
    links: frozenset[tuple[int, int]]
    labels: np.ndarray  # per raw point: unit id, -1 for non-walkable surfaces
    start: np.ndarray
    goal: np.ndarray
    start_unit: int
    goal_unit: int


@dataclass
class Scene:
    name: str
    seed: int
    cloud: PointCloud
    truth: SceneTruth


@dataclass(frozen=True)
class _Patch:
    """Parallelogram patch: origin plus two edge vectors."""

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    label: int  # ground-truth unit id, -1 for obstacles

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.e1, self.e2)))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)


def _rect(x0, x1, y0, y1, z, label) -> _Patch:
    return _Patch(
        np.array([x0, y0, z], dtype=float),
        np.array([x1 - x0, 0.0, 0.0]),
        np.array([0.0, y1 - y0, 0.0]),
        label,
    )


def _ramp_y(x0, x1, y0, y1, z0, z1, label) -> _Patch:
    """Plane climbing along +y from z0 at y0 to z1 at y1."""
    return _Patch(
        np.array([x0, y0, z0]),
        np.array([x1 - x0, 0.0, 0.0]),
        np.array([0.0, y1 - y0, z1 - z0]),
        label,
    )


def _ramp_x(x0, x1, y0, y1, z0, z1, label) -> _Patch:
    return _Patch(
        np.array([x0, y0, z0]),
        np.array([x1 - x0, 0.0, z1 - z0]),
        np.array([0.0, y1 - y0, 0.0]),
        label,
    )


def _wall_x(x, y0, y1, z0, z1, label=-1) -> _Patch:
    """Vertical sheet at constant x."""
    return _Patch(
        np.array([x, y0, z0]),
        np.array([0.0, y1 - y0, 0.0]),
        np.array([0.0, 0.0, z1 - z0]),
        label,
    )


def _wall_y(y, x0, x1, z0, z1, label=-1) -> _Patch:
    return _Patch(
        np.array([x0, y, z0]),
        np.array([x1 - x0, 0.0, 0.0]),
        np.array([0.0, 0.0, z1 - z0]),
        label,
    )


def _staircase(
    x0: float,
    x1: float,
    y_foot: float,
    z_base: float,
    direction: int,
    stair_label: int,
    top_label: int,
    n_risers: int = 5,
) -> list[_Patch]:
    """Treads and risers climbing along y (direction +1 or -1).

    Treads 1..n-1 carry stair_label; the top tread carries top_label so
    it can be folded into the upper floor it abuts. Risers are obstacles.
    """
    patches = []
    for k in range(n_risers):
        y = y_foot + direction * k * RUN
        patches.append(_wall_y(y, x0, x1, z_base + k * RISE, z_base + (k + 1) * RISE))
    for k in range(1, n_risers + 1):
        ya = y_foot + direction * (k - 1) * RUN
        yb = y_foot + direction * k * RUN
        label = top_label if k == n_risers else stair_label
        patches.append(_rect(x0, x1, min(ya, yb), max(ya, yb), z_base + k * RISE, label))
    return patches


def _stair_truth_plane(
    x0: float, x1: float, y_foot: float, z_base: float, direction: int, n_risers: int = 5
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares plane over the chain treads (top tread excluded).

    Computed from a dense noise-free sampling of treads 1..n-1, which is
    the surface the merged stair plane approximates.
    """
    pts = []
    for k in range(1, n_risers):
        ya = y_foot + direction * (k - 1) * RUN
        yb = y_foot + direction * k * RUN
        gx, gy = np.meshgrid(
            np.linspace(x0, x1, 60), np.linspace(min(ya, yb), max(ya, yb), 60)
        )
        z = np.full(gx.size, z_base + k * RISE)
        pts.append(np.column_stack([gx.ravel(), gy.ravel(), z]))
    transform, _, _ = fit_plane(np.vstack(pts))
    return transform.normal, transform.translation


def _sample(patches: list[_Patch], rng: np.random.Generator):
    points, labels = [], []
    for patch in patches:
        n = int(rng.poisson(DENSITY * patch.area))
        if n == 0:
            continue
        u = rng.uniform(size=(n, 1))
        v = rng.uniform(size=(n, 1))
        pts = patch.origin + u * patch.e1 + v * patch.e2
        pts = pts + rng.normal(0.0, NOISE_SIGMA, size=(n, 1)) * patch.normal
        points.append(pts)
        labels.append(np.full(n, patch.label))
    return np.vstack(points), np.concatenate(labels)


_UP = np.array([0.0, 0.0, 1.0])


def _slope_normal_y(z0, z1, y0, y1) -> np.ndarray:
    s = (z1 - z0) / (y1 - y0)
    n = np.array([0.0, -s, 1.0])
    return n / np.linalg.norm(n)


def _slope_normal_x(z0, z1, x0, x1) -> np.ndarray:
    s = (z1 - z0) / (x1 - x0)
    n = np.array([-s, 0.0, 1.0])
    return n / np.linalg.norm(n)


def _planes_scene() -> tuple[list, list, frozenset, dict]:
    # 0 lower floor, 1 upper floor, 2 ramp, 3 west stairs, 4 east stairs
    units = [
        GroundTruthUnit("floor_lower", "ground", _UP, np.array([4.0, 3.0, 0.0])),
        GroundTruthUnit("floor_upper", "ground", _UP, np.array([4.0, 8.7, 0.85])),
        GroundTruthUnit(
            "ramp", "slope", _slope_normal_y(0.0, 0.85, 6.0, 7.4),
            np.array([4.0, 6.7, 0.425]),
        ),
    ]
    for x0 in (0.6, 6.2):
        normal, point = _stair_truth_plane(x0, x0 + 1.2, 6.0, 0.0, +1)
        name = "stairs_west" if x0 < 4 else "stairs_east"
        units.append(GroundTruthUnit(name, "stairs", normal, point))

    patches = [
        _rect(0.0, 8.0, 0.0, 6.0, 0.0, 0),
        _rect(0.0, 8.0, 7.4, 10.0, 0.85, 1),
        _ramp_y(3.4, 4.6, 6.0, 7.4, 0.0, 0.85, 2),
    ]
    patches += _staircase(0.6, 1.8, 6.0, 0.0, +1, 3, top_label=1)
    patches += _staircase(6.2, 7.4, 6.0, 0.0, +1, 4, top_label=1)

    links = frozenset({(0, 2), (1, 2), (0, 3), (1, 3), (0, 4), (1, 4)})
    query = {
        "start": np.array([4.0, 1.0, 0.0]),
        "goal": np.array([4.0, 9.0, 0.85]),
        "start_unit": 0,
        "goal_unit": 1,
    }
    return units, patches, links, query


def _platform_scene() -> tuple[list, list, frozenset, dict]:
    # 0 west floor, 1 east floor, 2 platform, 3 west ramp, 4 east ramp
    # a full-width wall under the platform splits the floor in two; the
    # wall has real thickness and occludes the floor strip beneath it
    units = [
        GroundTruthUnit("floor_west", "ground", _UP, np.array([2.5, 3.0, 0.0])),
        GroundTruthUnit("floor_east", "ground", _UP, np.array([7.5, 3.0, 0.0])),
        GroundTruthUnit("platform", "ground", _UP, np.array([5.0, 3.0, 0.85])),
        GroundTruthUnit(
            "ramp_west", "slope", _slope_normal_x(0.0, 0.85, 2.4, 3.8),
            np.array([3.1, 3.0, 0.425]),
        ),
        GroundTruthUnit(
            "ramp_east", "slope", _slope_normal_x(0.85, 0.0, 6.2, 7.6),
            np.array([6.9, 3.0, 0.425]),
        ),
    ]
    patches = [
        _rect(0.0, 4.9, 0.0, 6.0, 0.0, 0),
        _rect(5.1, 10.0, 0.0, 6.0, 0.0, 1),
        _rect(3.8, 6.2, 1.8, 4.2, 0.85, 2),
        _ramp_x(2.4, 3.8, 2.2, 3.8, 0.0, 0.85, 3),
        _ramp_x(6.2, 7.6, 2.2, 3.8, 0.85, 0.0, 4),
        _wall_x(4.9, 0.0, 6.0, 0.0, 0.6),
        _wall_x(5.1, 0.0, 6.0, 0.0, 0.6),
    ]
    links = frozenset({(0, 3), (2, 3), (2, 4), (1, 4)})
    query = {
        "start": np.array([1.0, 3.0, 0.0]),
        "goal": np.array([9.0, 3.0, 0.0]),
        "start_unit": 0,
        "goal_unit": 1,
    }
    return units, patches, links, query


def _multilayer_scene() -> tuple[list, list, frozenset, dict]:
    # 0 level0, 1 level1, 2 level2, 3 ramp A, 4 ramp D, 5 stairs B, 6 stairs C
    units = [
        GroundTruthUnit("level0", "ground", _UP, np.array([5.0, 1.8, 0.0])),
        GroundTruthUnit("level1", "ground", _UP, np.array([5.0, 6.0, 0.85])),
        GroundTruthUnit("level2", "ground", _UP, np.array([5.0, 9.2, 1.7])),
        GroundTruthUnit(
            "ramp_a", "slope", _slope_normal_y(0.0, 0.85, 3.6, 5.0),
            np.array([1.5, 4.3, 0.425]),
        ),
        GroundTruthUnit(
            "ramp_d", "slope", _slope_normal_y(0.0, 0.85, 3.6, 5.0),
            np.array([3.7, 4.3, 0.425]),
        ),
    ]
    nb, pb = _stair_truth_plane(5.0, 6.4, 3.6, 0.0, +1)
    units.append(GroundTruthUnit("stairs_b", "stairs", nb, pb))
    nc, pc = _stair_truth_plane(8.2, 9.6, 7.0, 0.85, +1)
    units.append(GroundTruthUnit("stairs_c", "stairs", nc, pc))

    patches = [
        _rect(0.0, 10.0, 0.0, 3.6, 0.0, 0),
        _rect(0.0, 10.0, 5.0, 7.0, 0.85, 1),
        _rect(0.0, 10.0, 8.4, 10.0, 1.7, 2),
        _ramp_y(0.8, 2.2, 3.6, 5.0, 0.0, 0.85, 3),
        _ramp_y(3.0, 4.4, 3.6, 5.0, 0.0, 0.85, 4),
    ]
    patches += _staircase(5.0, 6.4, 3.6, 0.0, +1, 5, top_label=1)
    patches += _staircase(8.2, 9.6, 7.0, 0.85, +1, 6, top_label=2)

    links = frozenset({(0, 3), (0, 4), (0, 5), (1, 3), (1, 4), (1, 5), (1, 6), (2, 6)})
    query = {
        "start": np.array([1.5, 0.8, 0.0]),
        "goal": np.array([9.0, 9.4, 1.7]),
        "start_unit": 0,
        "goal_unit": 2,
    }
    return units, patches, links, query


def _building_scene() -> tuple[list, list, frozenset, dict]:
    # 0 ground floor, 1 upper floor, 2 landing, 3 flight up, 4 flight up (return)
    units = [
        GroundTruthUnit("floor0", "ground", _UP, np.array([4.0, 2.5, 0.0])),
        GroundTruthUnit("floor1", "ground", _UP, np.array([4.0, 2.5, 1.7])),
        GroundTruthUnit("landing", "ground", _UP, np.array([2.5, 7.1, 0.85])),
    ]
    n1, p1 = _stair_truth_plane(1.0, 2.2, 5.0, 0.0, +1)
    units.append(GroundTruthUnit("flight1", "stairs", n1, p1))
    n2, p2 = _stair_truth_plane(2.8, 4.0, 6.4, 0.85, -1)
    units.append(GroundTruthUnit("flight2", "stairs", n2, p2))

    patches = [
        _rect(0.0, 8.0, 0.0, 5.0, 0.0, 0),
        _rect(0.0, 8.0, 0.0, 5.0, 1.7, 1),
        _rect(1.0, 4.0, 6.4, 7.8, 0.85, 2),
        _wall_x(0.0, 0.0, 7.8, 0.0, 2.5),
        _wall_x(8.0, 0.0, 7.8, 0.0, 2.5),
    ]
    patches += _staircase(1.0, 2.2, 5.0, 0.0, +1, 3, top_label=2)
    patches += _staircase(2.8, 4.0, 6.4, 0.85, -1, 4, top_label=1)

    links = frozenset({(0, 3), (2, 3), (2, 4), (1, 4)})
    query = {
        "start": np.array([6.5, 1.0, 0.0]),
        "goal": np.array([6.5, 1.0, 1.7]),
        "start_unit": 0,
        "goal_unit": 1,
    }
    return units, patches, links, query


_BUILDERS = {
    "planes": _planes_scene,
    "platform": _platform_scene,
    "multilayer": _multilayer_scene,
    "building": _building_scene,
}


def make_scene(name: str, seed: int = DEFAULT_SEED) -> Scene:
    """Build a named benchmark scene with a reproducible point cloud."""
    if name not in _BUILDERS:
        raise ConfigError(f"unknown scene '{name}', expected one of {SCENE_NAMES}")
    rng = np.random.Generator(np.random.PCG64(seed))
    units, patches, links, query = _BUILDERS[name]()
    points, labels = _sample(patches, rng)
    truth = SceneTruth(
        units=units,
        links=links,
        labels=labels,
        start=query["start"],
        goal=query["goal"],
        start_unit=query["start_unit"],
        goal_unit=query["goal_unit"],
    )
    return Scene(name=name, seed=seed, cloud=PointCloud(points), truth=truth)
