"""Comparison of extraction output against scene ground truth.

Extracted planes are matched to ground-truth walkable units by majority
vote over per-point labels: each extracted point votes for the label of
its nearest raw scene point. A healthy extraction matches units one to
one, reproduces each unit's plane normal, and recovers the adjacency
between units exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .extraction import TraversablePlane
from .scenes import Scene

PURITY_MIN = 0.9
WALKABLE_MIN = 0.4


@dataclass
class MatchReport:
    """Result of matching extracted planes against ground truth."""

    assignment: dict[int, int]  # plane index -> unit id
    purity: dict[int, float]
    normal_error_deg: dict[int, float]
    kind_mismatches: list[int]
    unmatched_planes: list[int]
    missing_units: list[int]
    links: frozenset[tuple[int, int]]
    missing_links: frozenset[tuple[int, int]]
    spurious_links: frozenset[tuple[int, int]]

    @property
    def bijective(self) -> bool:
        if self.unmatched_planes or self.missing_units:
            return False
        units = list(self.assignment.values())
        return len(units) == len(set(units))

    @property
    def adjacency_exact(self) -> bool:
        return not self.missing_links and not self.spurious_links

    def max_normal_error_deg(self) -> float:
        if not self.normal_error_deg:
            return float("inf")
        return max(self.normal_error_deg.values())


def match_planes(planes: list[TraversablePlane], scene: Scene) -> MatchReport:
    """Match extracted planes to the scene's walkable units."""
    tree = cKDTree(scene.cloud.points)
    labels = scene.truth.labels
    n_units = len(scene.truth.units)

    assignment: dict[int, int] = {}
    purity: dict[int, float] = {}
    normal_err: dict[int, float] = {}
    kind_mismatches: list[int] = []
    unmatched: list[int] = []

    for plane in planes:
        local = np.column_stack(
            [plane.points_local, np.zeros(len(plane.points_local))]
        )
        world = plane.transform.to_world(local)
        _, nearest = tree.query(world)
        votes = labels[nearest]
        walkable = votes[votes >= 0]
        # votes for obstacle surfaces (risers, wall feet) are ambiguous at
        # creases; a real walkable plane must still be dominated by them
        if len(walkable) < WALKABLE_MIN * len(votes):
            unmatched.append(plane.index)
            continue
        counts = np.bincount(walkable, minlength=n_units)
        unit = int(counts.argmax())
        frac = counts[unit] / len(walkable)
        purity[plane.index] = float(frac)
        if frac < PURITY_MIN:
            unmatched.append(plane.index)
            continue
        assignment[plane.index] = unit
        gt = scene.truth.units[unit]
        cosang = abs(float(plane.transform.normal @ gt.normal))
        normal_err[plane.index] = float(np.degrees(np.arccos(min(1.0, cosang))))
        if plane.kind.value != gt.kind:
            kind_mismatches.append(plane.index)

    matched_units = set(assignment.values())
    missing_units = [u for u in range(n_units) if u not in matched_units]

    links = set()
    for plane in planes:
        if plane.index not in assignment:
            continue
        for j in plane.neighbors:
            if j in assignment:
                pair = tuple(sorted((assignment[plane.index], assignment[j])))
                links.add(pair)
    truth_links = {tuple(sorted(p)) for p in scene.truth.links}

    return MatchReport(
        assignment=assignment,
        purity=purity,
        normal_error_deg=normal_err,
        kind_mismatches=kind_mismatches,
        unmatched_planes=unmatched,
        missing_units=missing_units,
        links=frozenset(links),
        missing_links=frozenset(truth_links - links),
        spurious_links=frozenset(links - truth_links),
    )
