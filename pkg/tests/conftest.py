import time

import numpy as np
import pytest

from hazegen.adapters import StretchRestorer, UnsharpEnhancer
from hazegen.augment import AugmentConfig
from hazegen.dataset import TileConfig, build_bs_pairs, build_de_pairs, build_id_pairs
from helpers import bright_light_map, smooth_image

_ACCEPTANCE: dict[str, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    label, outcome, spent = _ACCEPTANCE.get(item.nodeid, (marker.args[0], "PASSED", 0.0))
    if rep.when == "call" or rep.outcome != "passed":
        outcome = rep.outcome.upper() if outcome == "PASSED" else outcome
    _ACCEPTANCE[item.nodeid] = (label, outcome, spent + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, dur in sorted(_ACCEPTANCE.values()):
        status = "PASS" if outcome == "PASSED" else "FAIL"
        terminalreporter.write_line(f"{status}  {label}  ({dur:.1f}s)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_datasets():
    """Eight-sample ID / DE / BS datasets at 32x32."""
    rng = np.random.default_rng(0)
    haze = [smooth_image(rng) for _ in range(8)]
    clear = [smooth_image(rng, scale=0.5) for _ in range(8)]
    lights = [bright_light_map(rng, 32) for _ in range(3)]
    d_id = build_id_pairs(haze, StretchRestorer(16), TileConfig(16, 8))
    d_de = build_de_pairs(d_id, UnsharpEnhancer())
    d_bs = build_bs_pairs(clear, lights, AugmentConfig(), rng)
    return d_id, d_de, d_bs


@pytest.fixture
def timer():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
