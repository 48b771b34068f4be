import os

# Let the fused-kernel tests request up to 8 workers even on small machines.
os.environ.setdefault("NUMBA_NUM_THREADS", "8")
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


ACCEPTANCE_LINES = []


class Criterion:
    """Records one acceptance criterion's outcome as a single summary line."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details = []
        self.soft_failed = False

    def note(self, text: str):
        self.details.append(text)

    def line(self, status: str) -> str:
        detail = "; ".join(self.details)
        return f"[{status}] AC{self.number} {self.title}" + (f" ({detail})" if detail else "")


@pytest.fixture
def criterion(request):
    made = []

    def make(number, title):
        made.append(Criterion(number, title))
        return made[-1]

    yield make
    failed = request.node.rep_call.failed if hasattr(request.node, "rep_call") else True
    for c in made:
        status = "FAIL" if failed else ("SOFT-FAIL" if c.soft_failed else "PASS")
        text = c.line(status)
        print(text)
        ACCEPTANCE_LINES.append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for text in sorted(ACCEPTANCE_LINES, key=lambda t: int(t.split("AC")[1].split()[0])):
            terminalreporter.write_line(text)
