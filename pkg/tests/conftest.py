import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ggmcert.camera import CameraIntrinsics, PoseBox  # noqa: E402
from ggmcert.target import load_target  # noqa: E402

DESK = CameraIntrinsics(53.333, 64, 48)


@pytest.fixture(scope="session")
def desk_camera():
    return DESK


@pytest.fixture(scope="session")
def slow_vehicle():
    return load_target("slow_vehicle")


@pytest.fixture(scope="session")
def stop_sign():
    return load_target("stop_sign")


@pytest.fixture(scope="session")
def runway():
    return load_target("runway")


@pytest.fixture(scope="session")
def tight_box():
    """A sub-centimetre box in which the slow-vehicle sign stays fully in view."""
    return PoseBox([-0.004, -0.004, 0.996, 0.05, 0.05, 0.05], [0.004, 0.004, 1.004, 0.05, 0.05, 0.05])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion; printed again in the terminal summary."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
