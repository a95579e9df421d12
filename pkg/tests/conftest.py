import numpy as np
import pytest

from liftslam.geometry import CameraIntrinsics, PoseSE3, so3_exp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera pose at ``center`` with the optical axis towards ``target``."""
    c = np.asarray(center, float)
    z = np.asarray(target, float) - c
    z /= np.linalg.norm(z)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    return PoseSE3(R_wc.T, -R_wc.T @ c)


def random_pose(rng, rot=0.3, trans=1.0):
    return PoseSE3(so3_exp(rng.normal(size=3) * rot), rng.normal(size=3) * trans)


@pytest.fixture(scope="session")
def circle():
    from liftslam.datasets import SyntheticSpec, generate_synthetic

    return generate_synthetic(SyntheticSpec())


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
