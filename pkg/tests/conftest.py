"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

import pytest

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    if not rep.passed and call.excinfo is not None:
        detail = (detail + "; " if detail else "") + call.excinfo.exconly().splitlines()[0][:200]
    _results[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_results):
        status, title, detail = _results[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
