"""Shared test plumbing: collects acceptance-criterion results so one
pass/fail line per criterion is printed at the end of the run even when
pytest captures stdout."""

ACCEPTANCE_LINES = []


def record_criterion(name: str, passed: bool, detail: str = "") -> bool:
    status = "PASS" if passed else "FAIL"
    line = f"[acceptance] {name}: {status}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
