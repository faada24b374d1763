"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""

import pytest

_RESULTS: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _RESULTS.setdefault(marker.args[0], []).append((status, f"{item.name}: {detail}" if detail else item.name))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        entries = _RESULTS[n]
        status = "PASS" if all(s == "PASS" for s, _ in entries) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} | " + " | ".join(d for _, d in entries))
