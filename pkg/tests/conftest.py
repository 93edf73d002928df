from importlib import resources
from pathlib import Path

import pytest

DATA = Path(str(resources.files("hybridplan") / "data"))


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def r18_path():
    return DATA / "resattnet18.json"


@pytest.fixture
def r34_path():
    return DATA / "resattnet34.json"


@pytest.fixture
def v100_path():
    return DATA / "v100x8.yaml"


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line; it is echoed now and again in the terminal summary."""

    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
