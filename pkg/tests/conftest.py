import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gltpeft.backbone import build_network  # noqa: E402

# narrow plan for fast structural tests
SMALL_PLAN = (2, 4, 4, 8, 8, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_seg():
    return build_network(SMALL_PLAN, "segmentation", seed=3)


# --- acceptance summary: one pass/fail line per criterion ---------------------

_CRITERIA: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.passed and rep.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(f"{k} {v}" for k, v in rep.user_properties)
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    if number not in _CRITERIA or status != "PASS":
        _CRITERIA[number] = f"criterion {number:2d} {status}  {title}" + (f"  ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
