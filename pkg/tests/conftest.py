from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def read_kv(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


@pytest.fixture
def fixtures_dir():
    return FIXTURES


CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion and print it."""

    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        CRITERIA.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
