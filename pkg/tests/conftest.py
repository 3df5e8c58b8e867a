import pytest

from quasikam.kam_engine import make_schedule, run_induction
from quasikam.model import dc1
from quasikam.torus_model import derive_seed

# DC1 at eps = 1e-8: the localized variant used to exercise the full machinery.
LOC_EPS = 1e-8
LOC_SEED = derive_seed(42, "resample", 3)


@pytest.fixture(scope="session")
def loc_model():
    return dc1(eps=LOC_EPS, master_seed=LOC_SEED)


@pytest.fixture(scope="session")
def loc_schedule():
    return make_schedule(eps=LOC_EPS)


@pytest.fixture(scope="session")
def loc_run(loc_model, loc_schedule):
    return run_induction(loc_model.hamiltonian(), loc_schedule)


@pytest.fixture(scope="session")
def dc1_model():
    return dc1()


@pytest.fixture(scope="session")
def dc1_schedule():
    return make_schedule(eps=1e-3)


# Acceptance verdicts, printed after the run whatever the capture mode.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
