import pytest

# lines of the form "criterion N: PASS|FAIL ..." gathered by the acceptance suite
VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str) -> bool:
        VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(VERDICTS[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
