from __future__ import annotations

import copy

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvdpose import _kernels
from mvdpose.geometry import CameraIntrinsics, RigidTransform, rotation_about
from mvdpose.simulator import SceneConfig, generate_frame

settings.register_profile(
    "mvdpose", max_examples=40, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("mvdpose")

# one "CRITERION n PASS|FAIL ..." line per acceptance check, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session", autouse=True)
def _jit():
    _kernels.warmup()


@pytest.fixture
def intr() -> CameraIntrinsics:
    return CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)


def random_pose(rng: np.random.Generator, max_angle: float = np.pi, t_scale: float = 1000.0) -> RigidTransform:
    R = rotation_about(rng.normal(size=3), rng.uniform(0, max_angle))
    return RigidTransform(R, rng.normal(size=3) * t_scale)


def two_view_scene(rng: np.random.Generator, n: int = 30, baseline: float = 1500.0):
    """Points in front of two cameras; returns (points in cam i, pose i->j)."""
    P = np.column_stack([rng.uniform(-800, 800, n), rng.uniform(-600, 600, n), rng.uniform(2500, 4500, n)])
    yaw = rng.uniform(-0.4, 0.4)
    R = rotation_about([0.0, 1.0, 0.0], yaw) @ rotation_about(rng.normal(size=3), rng.uniform(0, 0.1))
    c_j = np.array([baseline, rng.uniform(-100, 100), rng.uniform(-300, 300)])
    T = RigidTransform(R, -R @ c_j)
    return P, T


_FRAMES: dict = {}


def cached_frame(**kw):
    """Deep copy of a simulated frame, generated once per config."""
    key = tuple(sorted(kw.items()))
    if key not in _FRAMES:
        _FRAMES[key] = generate_frame(SceneConfig(**kw))
    return copy.deepcopy(_FRAMES[key])
