import time

import pytest

from iotpipe.pdm import feature_matrix
from iotpipe.simulator import SimConfig
from iotpipe.simulator.dataset import plan_dataset

# Shortened cycles keep the 300-cycle set inside the test budget.
DATASET_SCALE = 0.05
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def sim_dataset():
    """(X, y, ids) for 3 classes x 100 cycles, seed 42."""
    t0 = time.perf_counter()
    cycles = plan_dataset(100, SimConfig(seed=42, duration_scale=DATASET_SCALE))
    out = feature_matrix(cycles)
    TIMINGS["sim_dataset"] = time.perf_counter() - t0
    return out


# -- acceptance reporting -------------------------------------------------------

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    n, title = m.args
    r = _RESULTS.setdefault(n, {"title": title, "ok": True, "seconds": 0.0, "ran": False})
    if rep.when == "call":
        r["ran"] = True
        r["seconds"] += rep.duration
    if rep.failed:
        r["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        verdict = "PASS" if r["ok"] and r["ran"] else "FAIL"
        tr.write_line(f"criterion {n:2d}: {verdict}  {r['title']} ({r['seconds']:.1f} s)")
