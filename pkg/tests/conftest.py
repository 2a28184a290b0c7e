import numpy as np
import pytest

from fominlab.drift_models import get_model
from fominlab.fomin_calculus import ScoreField, kde_fit
from fominlab.invariant_measure import sample_long_run
from fominlab.sde_engine import SimConfig

STATIONARY_SIM = SimConfig(dt=0.005, t_final=5.0, n_paths=100_000, seed=0)


def _stationary(name):
    m = get_model(name)
    return m, sample_long_run(m, np.zeros(m.d), 5.0, 100_000, 1.0, STATIONARY_SIM)


@pytest.fixture(scope="session")
def ou_stationary():
    return _stationary("ou")


@pytest.fixture(scope="session")
def rotated_stationary():
    return _stationary("rotated")


@pytest.fixture(scope="session")
def double_well_stationary():
    return _stationary("double_well")


@pytest.fixture(scope="session")
def ou_score(ou_stationary):
    _, meas = ou_stationary
    return ScoreField(kde_fit(meas, "score_matching", variance_correction=True))


@pytest.fixture(scope="session")
def rotated_score(rotated_stationary):
    _, meas = rotated_stationary
    return ScoreField(kde_fit(meas, "score_matching", variance_correction=True))


@pytest.fixture(scope="session")
def double_well_score(double_well_stationary):
    _, meas = double_well_stationary
    return ScoreField(kde_fit(meas, "score_matching", variance_correction=True))


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> (title, passed, detail); printed after the run."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
