"""Shared fixtures: benchmark scenes and their extracted plane sets.

Scene construction and extraction are the slowest steps in the suite,
so both are cached for the whole session and shared across modules.
"""

import pytest

from planeway.extraction import extract_traversable_planes
from planeway.scenes import SCENE_NAMES, make_scene


@pytest.fixture(scope="session")
def scenes():
    return {name: make_scene(name) for name in SCENE_NAMES}


@pytest.fixture(scope="session")
def extracted(scenes):
    return {name: extract_traversable_planes(scene.cloud) for name, scene in scenes.items()}
