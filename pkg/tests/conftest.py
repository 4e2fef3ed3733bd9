import pytest

from nnilqr.config import bundled_model_path
from nnilqr.neural import load_model

# Lines appended by tests/test_acceptance.py, echoed once at the end of the run so the
# per-criterion verdicts are visible even with output capture on.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def gem_model():
    return load_model(bundled_model_path("gem"))


@pytest.fixture(scope="session")
def warthog_model():
    return load_model(bundled_model_path("warthog"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
