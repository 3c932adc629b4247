import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def record(request):
    """Attach a one-line measurement to the current acceptance criterion."""
    def _record(text):
        request.node.user_properties.append(("detail", text))
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    n = marker.args[0]
    entry = _RESULTS.setdefault(n, {"passed": True, "details": [], "name": item.name})
    if rep.failed:
        entry["passed"] = False
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        status = "PASS" if e["passed"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"AC{n:<2} {status}  {e['name']}" + (f"  [{detail}]" if detail else ""))
