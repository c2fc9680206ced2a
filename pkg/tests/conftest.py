import math

import numpy as np
import pytest
from hypothesis import strategies as st

from bevsup.scene import Intrinsics, Pose

ACCEPTANCE_LINES: list[str] = []


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_pose(rng: np.random.Generator, scale: float = 5.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-scale, scale, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def intr():
    return Intrinsics(fx=100.0, fy=110.0, cx=32.0, cy=24.0, width=64, height=48)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
angles = st.floats(-20 * math.pi, 20 * math.pi, allow_nan=False, allow_infinity=False)


@st.composite
def unit_vectors(draw):
    v = np.array(draw(st.tuples(finite, finite, finite)))
    n = np.linalg.norm(v)
    if n < 1e-3:
        v, n = np.array([0.0, 0.0, 1.0]), 1.0
    return v / n


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
