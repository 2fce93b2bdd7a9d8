"""Collects acceptance verdicts and prints one line per criterion after the run."""

ACCEPTANCE = {}
N_CRITERIA = 10


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    ran = [item for item in terminalreporter.stats.get("passed", []) +
           terminalreporter.stats.get("failed", []) if "test_acceptance" in item.nodeid]
    if not ran and not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "not reached"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
