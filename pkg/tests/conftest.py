"""Collects acceptance results so the run ends with one pass/fail line per criterion."""

import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title

    def record(self, passed: bool, detail: str) -> bool:
        ACCEPTANCE[self.number] = (self.title, bool(passed), detail)
        print(self.line())
        return passed

    def line(self) -> str:
        title, passed, detail = ACCEPTANCE[self.number]
        return f"criterion {self.number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"


@pytest.fixture
def criterion(request):
    """``criterion(n, title)`` returns a recorder; an unrecorded criterion counts as failed."""
    made = []

    def make(number, title):
        made.append(Criterion(number, title))
        return made[-1]

    yield make
    for c in made:
        if c.number not in ACCEPTANCE:
            ACCEPTANCE[c.number] = (c.title, False, "raised before recording a result")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
