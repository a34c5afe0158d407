"""Collects the acceptance results and prints one line per criterion at the end of the run."""

ACCEPTANCE_LINES: dict[str, str] = {}


def record(key: str, passed: bool, detail: str) -> None:
    line = f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)


def _order(key: str):
    num = "".join(ch for ch in key if ch.isdigit())
    return int(num or 0), key


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=_order):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
