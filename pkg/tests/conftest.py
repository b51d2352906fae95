import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oaid import corpus as C  # noqa: E402


def small_manifest(seed=0, image_size=32, counts=(12, 4, 6), ids=("a1", "b1", "c1")):
    fps = C.default_fingerprints()
    base = C.default_manifest(seed=seed, image_size=image_size, counts=counts)
    base.sources = [s for s in base.sources if s.id in ids]
    for s in base.sources:
        s.fingerprint = fps[s.id]
    return base


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_manifest():
    return small_manifest()


# one summary line per acceptance criterion, whatever the verbosity
_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n = marker.args[0]
    if n in _criteria and _criteria[n][0] == "FAIL":
        return
    status = "PASS" if report.passed else "FAIL"
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and report.longrepr is not None:
        last = str(report.longrepr).strip().splitlines()[-1]
        detail = f"{detail}  [{last}]".strip()
    _criteria[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        status, detail = _criteria[k]
        terminalreporter.write_line(f"criterion {k:2d}: {status}  {detail}")
