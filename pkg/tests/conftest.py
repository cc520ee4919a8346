import pytest

# one (criterion, passed, detail) entry per acceptance check, in run order
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(name: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
