import pytest

from piezoskin.daq import palm34
from piezoskin.scenario import train_contact_detector
from piezoskin.substrate import substrate_by_name


@pytest.fixture(scope="session")
def ld_detector():
    """Default contact detector for the low-density foam on the palm layout."""
    return train_contact_detector(substrate_by_name("ld"), palm34(), seed=0)


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome for the terminal summary."""
    def record(number, title, ok, seconds, budget, detail=""):
        _ACCEPTANCE.append((number, title, ok, seconds, budget, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, seconds, budget, detail in sorted(_ACCEPTANCE):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(
            f"[{status}] {number:2d}. {title} ({seconds:.1f} s, budget {budget:g} s) {detail}")
