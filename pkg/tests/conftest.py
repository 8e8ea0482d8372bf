import numpy as np
import pytest

from perfmod.core import MachineProfile, default_registry
from perfmod.truths import TruthTable

# zero-noise polynomial truths with a 20 us per-call overhead
TRINV_TRUTHS = """
GEMM   *       2e-5 + 2.4e-10*m*n*k + 1e-9*(m*n + n*k)
TRMM   side=L  2e-5 + 1.6e-10*n*m^2 + 1e-9*m*n
TRMM   side=R  2e-5 + 1.6e-10*m*n^2 + 1e-9*m*n
TRSM   side=L  2e-5 + 2.0e-10*n*m^2 + 1e-9*m*n
TRSM   side=R  2e-5 + 2.0e-10*m*n^2 + 1e-9*m*n
TRTRI  *       2e-5 + 1e-9*n^3 + 1e-8*n^2
"""


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture(scope="session")
def profile():
    return MachineProfile("synthetic", 1e10, 4, 1e-9)


@pytest.fixture(scope="session")
def trinv_truths():
    return TruthTable.parse(TRINV_TRUTHS)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[str, str] = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        why = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"criterion {self.number} [{status}] {self.title}" + (f" ({why})" if why else "")
        ACCEPTANCE_LINES[str(self.number)] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
