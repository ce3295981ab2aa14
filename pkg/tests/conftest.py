from pathlib import Path

import pytest

from fairmsm.core import Sojourn, Trajectory, three_state_spec

DATA = Path(__file__).parent / "data"


@pytest.fixture
def spec3():
    return three_state_spec()


@pytest.fixture
def worked_trajectory():
    """Healthy 70.5-71.9, then disabled until death at 73.8."""
    return Trajectory(1, [Sojourn("Healthy", 70.5, 71.9), Sojourn("Disabled", 71.9, 73.8)], "Dead")


# --- acceptance summary ------------------------------------------------------
# Tests in test_acceptance.py tag themselves with record_property("criterion", k)
# and a one-line "detail"; the outcomes are listed at the end of the run.

_criteria = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" in props and (report.when == "call" or report.failed):
        _criteria[props["criterion"]] = (report.passed, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        ok, detail = _criteria[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
