import pytest

_RESULTS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def verdict(request):
    """Record a PASS/FAIL line for the criterion the test is marked with."""
    number = request.node.get_closest_marker("criterion").args[0]

    def record(ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _RESULTS[number] = line
        print(line)
        return ok

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.when == "call" and rep.failed and marker.args[0] not in _RESULTS:
        _RESULTS[marker.args[0]] = f"FAIL criterion {marker.args[0]}: raised {call.excinfo.typename}"


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[number])
