from __future__ import annotations

import re

import pytest

from aronsson_lab import grid as gd
from aronsson_lab import hamiltonian as hm
from aronsson_lab import solver as sv

EPS_LADDER = (0.5, 0.1, 0.02)
_CRITERIA: dict[int, list[str]] = {}


def _ladder(n):
    H = hm.quadratic(1.0, 0.0, 1.0)
    return H, sv.eps_continuation(H, gd.Grid2D.square(n), sv.aronsson_function, EPS_LADDER)


@pytest.fixture(scope="session")
def aronsson65():
    """Half-square-norm solves with Aronsson boundary data on 65^2 along the standard ladder."""
    return _ladder(65)


@pytest.fixture(scope="session")
def aronsson129():
    return _ladder(129)


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    if report.when == "call" or report.failed:
        _CRITERIA.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok = all(o == "passed" for o in _CRITERIA[k])
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}")
