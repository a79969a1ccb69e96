import json
import math

import numpy as np
import pytest

from rgbd_fusion.calib import CalibrationBundle, CameraIntrinsics, RigidTransform


def rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_bundle(rng, width=640, height=480, max_angle=None):
    intr = CameraIntrinsics(
        fx=rng.uniform(200, 1500), fy=rng.uniform(200, 1500),
        cx=rng.uniform(0.3, 0.7) * width, cy=rng.uniform(0.3, 0.7) * height, width=width, height=height,
    )
    r = random_rotation(rng) if max_angle is None else rot_z(rng.uniform(-max_angle, max_angle))
    return CalibrationBundle(intr, RigidTransform.from_rt(r, rng.uniform(-0.1, 0.1, 3)))


@pytest.fixture
def wide_calib():
    intr = CameraIntrinsics(fx=1000, fy=1000, cx=960, cy=600, width=1920, height=1200)
    return CalibrationBundle(intr, RigidTransform.identity())


@pytest.fixture
def write_json(tmp_path):
    def _write(name, doc):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return p

    return _write


def frustum_points(rng, calib, n, z_range=(0.2, 5.0), margin=0.5):
    """Depth-sensor-frame points whose camera-frame image lies in (or near) the frame."""
    k = calib.intrinsics
    z = rng.uniform(*z_range, n)
    u = rng.uniform(-margin * k.width, (1 + margin) * k.width, n)
    v = rng.uniform(-margin * k.height, (1 + margin) * k.height, n)
    cam = np.column_stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])
    return calib.extrinsics.inverse().apply(cam)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
