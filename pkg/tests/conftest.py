import numpy as np
import pytest

from entrisk.distributions import Gmm

EX2 = Gmm([0.7, 0.3], [0.5, 1.0], [2.0, 1.0])
# project-selection mixture and the loss multipliers of the three projects
PROJECT_GMM = Gmm([0.16, 0.28, 0.23, 0.20, 0.13], [-19.5, -19.0, -18.5, -18.0, -17.5],
                  [4 / 25, 1 / 4, 4 / 9, 1.0, 4.0])
PROJECT_SCALES = (0.4, 0.6, 0.8)

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Register one acceptance line: (label, passed, detail)."""

    def _record(label, passed, detail=""):
        _ACCEPTANCE.append((label, bool(passed), detail))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
