import re

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(report.user_properties).get("detail", "")
        if report.failed and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
        _results[int(m.group(1))] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        outcome, detail = _results[n]
        word = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {n:2d}: {word}  {detail}")
