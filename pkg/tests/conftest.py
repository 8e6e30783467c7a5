import numpy as np
import pytest
from hypothesis import settings, strategies as st

from dgslam.geometry import Intrinsics, Pose, so3_exp

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@st.composite
def poses(draw, max_angle=3.0, max_trans=2.0):
    axis = np.array(draw(st.lists(st.floats(-1, 1), min_size=3, max_size=3)))
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([0.0, 0.0, 1.0])
    angle = draw(st.floats(0.0, max_angle))
    t = draw(st.lists(st.floats(-max_trans, max_trans), min_size=3, max_size=3))
    return Pose.from_rt(so3_exp(axis / np.linalg.norm(axis) * angle), t)


@pytest.fixture
def K100():
    return Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
