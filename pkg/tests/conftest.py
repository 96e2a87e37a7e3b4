import numpy as np
import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion for the summary lines."""

    def record(number: int, ok: bool, detail: str) -> None:
        prev_ok, prev = ACCEPTANCE.get(number, (True, ""))
        ACCEPTANCE[number] = (prev_ok and ok, f"{prev}; {detail}" if prev else detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
