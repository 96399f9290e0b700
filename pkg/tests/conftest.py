import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    def record(number: int, name: str, passed: bool, detail: str = ""):
        line = f"[acceptance {number}] {'PASS' if passed else 'FAIL'} {name}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
