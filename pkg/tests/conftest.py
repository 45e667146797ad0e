"""Shared fixtures; collects and prints the acceptance verdicts."""

import functools

import pytest

from meanaic.simulation import Scenario, run_scenario

# criterion number -> (description, passed, detail)
_VERDICTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, description): acceptance criterion check")


@functools.lru_cache(maxsize=None)
def _scenario_report(n=80, beta1=0.2, sigma0_sq=0.005, sigma1_sq=0.005, law="normal", criteria=("meanAIC",), replicates=500, seed=2024):
    """Run (once per session) and return a scenario report."""
    s = Scenario(
        K=20,
        cluster_sizes=(n,),
        beta1=beta1,
        sigma0_sq=sigma0_sq,
        sigma1_sq=sigma1_sq,
        re_law=law,
        replicates=replicates,
        base_seed=seed,
    )
    return run_scenario(s, criteria)


@pytest.fixture(scope="session")
def scenario_report():
    """Cached scenario runner shared by every test in the session."""
    return _scenario_report


@pytest.fixture
def note(request):
    """Attach a one-line summary of observed values to the current criterion."""
    marker = request.node.get_closest_marker("criterion")

    def _note(text):
        _VERDICTS.setdefault(marker.args[0], [marker.args[1], None, ""])[2] = text

    return _note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    entry = _VERDICTS.setdefault(marker.args[0], [marker.args[1], None, ""])
    entry[1] = rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        desc, passed, detail = _VERDICTS[number]
        status = "PASS" if passed else ("FAIL" if passed is not None else "NOT RUN")
        tr.write_line(f"criterion {number:>2}: {status:<7} {desc}")
        if detail:
            tr.write_line(f"               {detail}")
