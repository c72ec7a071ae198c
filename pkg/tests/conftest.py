import numpy as np
import pytest

from cloud_delta import synth
from cloud_delta.core import Trajectory, apply_transform

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "setup" and not rep.failed:
        return
    _ACCEPTANCE[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {title}" + (f" ({detail})" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_transform(rng, max_angle=np.pi, max_shift=5.0):
    from cloud_delta.core import RigidTransform

    axis = rng.normal(size=3)
    return RigidTransform.from_axis_angle(axis, rng.uniform(-max_angle, max_angle),
                                          rng.uniform(-max_shift, max_shift, 3))


def aligned(scene):
    """Later session of a synthetic scene expressed in the common frame."""
    return apply_transform(scene.M_t1, scene.T_true), Trajectory(scene.T_true.apply(scene.Tr_t1.xyz))


@pytest.fixture(scope="session")
def standard0():
    return synth.generate(synth.standard_scene(0))


@pytest.fixture(scope="session")
def corridor():
    """A small change-free tunnel used by several unit tests."""
    return synth.generate(synth.SceneSpec(seed=7, length=20.0))
