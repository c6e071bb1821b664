import pytest

_VERDICTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    n = mark.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        _VERDICTS[n] = ("FAIL", detail or f"{rep.when} failed")
    elif rep.when == "call" and rep.passed:
        _VERDICTS[n] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
