import numpy as np
import pytest

from pruned_rnnt.core import TargetSequence, log_softmax

_CRITERIA = {}


def random_target(rng, U, V):
    return TargetSequence(rng.integers(1, V, U), V)


def random_grid(rng, T, U, V, scale=1.0):
    """Normalized ``(T, U+1, V)`` log-prob grid."""
    return log_softmax(rng.normal(0, scale, (T, U + 1, V)), axis=2)


def random_instance(rng, max_T=5, max_U=4, max_V=5, min_V=2):
    T = int(rng.integers(1, max_T + 1))
    U = int(rng.integers(0, max_U + 1))
    V = int(rng.integers(min_V, max_V + 1))
    return T, U, V, random_target(rng, U, V)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    _CRITERIA[n] = f"[{status}] criterion {n:>2}: {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
