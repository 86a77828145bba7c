from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cvp.scene import CameraParams

DATA = Path(__file__).parent / "data"

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def make_camera(rng, width=64, height=48):
    R = Rotation.random(random_state=rng).as_matrix()
    fx, fy = rng.uniform(20, 200, size=2)
    K = np.array([[fx, rng.uniform(-2, 2), rng.uniform(0, width)], [0, fy, rng.uniform(0, height)], [0, 0, 1.0]])
    return CameraParams(K, R, rng.uniform(-5, 5, size=3), width, height)


def identity_camera(t=(0.0, 0.0, 0.0), width=4, height=4):
    return CameraParams(np.eye(3), np.eye(3), np.asarray(t, dtype=float), width, height)


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
