"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion at the end of the run."""
import pytest

_OUTCOMES: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = ""
        if report.outcome != "passed":
            text = str(report.longrepr).strip().splitlines()
            detail = next((line for line in text if line.startswith("E ")), text[-1] if text else "")
            detail = detail.removeprefix("E").strip()
        else:
            detail = item.user_properties and dict(item.user_properties).get("detail", "") or ""
        if number in _OUTCOMES:  # criteria split over several tests: FAIL wins, details accumulate
            old_verdict, _, old_detail = _OUTCOMES[number]
            verdict = "FAIL" if "FAIL" in (old_verdict, verdict) else verdict
            detail = "; ".join(d for d in (old_detail, detail) if d)
        _OUTCOMES[number] = (verdict, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        verdict, title, detail = _OUTCOMES[number]
        line = f"criterion {number:2d} {verdict}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
