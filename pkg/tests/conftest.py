import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# step answers whose runs are <1,1,1,2,3,9>
FIG1_ANSWERS = ["1024", "17", "198", "17", "17", "200", "200", "200"] + ["197"] * 9


@pytest.fixture
def fig1_answers():
    return list(FIG1_ANSWERS)


# one line per acceptance criterion, echoed at the end of every run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
