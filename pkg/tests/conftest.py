"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE[number] = (title, bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
