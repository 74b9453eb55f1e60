import datetime as dt

import pytest

from mobility_dp.domain import toy_region_tree

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def toy_tree():
    return toy_region_tree()


@pytest.fixture
def friday():
    return dt.date(2020, 3, 20)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
