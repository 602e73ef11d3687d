"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

# criterion number -> {"title": str, "details": [str], "outcomes": [bool]}
_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by this test")


@pytest.fixture
def report(request):
    """Record a measured value for the criterion this test belongs to."""
    marker = request.node.get_closest_marker("criterion")
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "details": [], "outcomes": []})
    return entry["details"].append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "details": [], "outcomes": []})
    entry["outcomes"].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        ok = bool(entry["outcomes"]) and all(entry["outcomes"])
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}  {entry['title']}"
                                    + (f"  ({detail})" if detail else ""))
