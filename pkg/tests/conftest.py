"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "detail": []})
        entry["ok"] = entry["ok"] and rep.passed
        entry["detail"].extend(v for k, v in item.user_properties if k == "detail")
        if rep.when == "setup":
            entry["detail"].append(f"setup failed: {rep.longreprtext.splitlines()[-1] if rep.longreprtext else ''}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        tr.write_line(f"[{status}] {number:2d}. {e['title']}: {'; '.join(e['detail'])}")
