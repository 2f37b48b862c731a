import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # lets tests import the local oracles module

CRITERIA: list[str] = []


@pytest.fixture
def record():
    """Append one PASS/FAIL line for an acceptance criterion."""

    def _record(number: int, name: str, ok: bool, detail: str, seconds: float, limit: float):
        within = seconds <= limit
        status = "PASS" if ok and within else "FAIL"
        line = f"[{status}] criterion {number}: {name} | {detail} | {seconds:.1f}s (limit {limit:.0f}s)"
        CRITERIA.append(line)
        print(line)
        return ok and within

    return _record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
