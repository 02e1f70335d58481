import os

os.environ.setdefault("FASTADV_CHECK_BUDGET", "1")

import numpy as np
import pytest

from fastadv import attacks
from fastadv import tensor as T
from fastadv.data import gen_synthetic_blobs

# every attack and projected trainer re-checks the L-inf budget in the test build
attacks.BUDGET_CHECKS = True

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.fixture(autouse=True)
def _default_precision():
    T.set_precision(32)
    yield
    T.set_precision(32)


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def blobs():
    return gen_synthetic_blobs(3, 8, 40, 0.1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _ACCEPTANCE_MARKS.get(report.nodeid)
    if marker is None:
        return
    number, title = marker
    status = "PASS" if report.outcome == "passed" else "FAIL"
    if report.when == "setup" and report.outcome == "skipped":
        status = "SKIP"
    _ACCEPTANCE[number] = (status, title)


_ACCEPTANCE_MARKS: dict[str, tuple[int, str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _ACCEPTANCE_MARKS[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
