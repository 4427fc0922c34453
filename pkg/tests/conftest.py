import numpy as np
import pytest

from eml.field import FixedPointParams
from eml.runtime import local_parties, run_pair

ACCEPTANCE_LINES: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one of the twelve acceptance criteria")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def params42():
    return FixedPointParams.from_precision(42)


@pytest.fixture
def params15():
    return FixedPointParams.from_precision(15)


@pytest.fixture
def pair42(params42):
    return local_parties(params42, seed=7)


def run_both(fn, params, seed=11, **kw):
    """Run ``fn(P)`` on both parties of a fresh dealer-backed session."""
    A, B = local_parties(params, seed=seed, **kw)
    return run_pair(fn, None, A, B), (A, B)


@pytest.fixture(scope="session")
def syn_small():
    from eml.datasets import featurize, synthetic_qm9

    syn = synthetic_qm9(120, seed=5)
    return featurize(syn.molecules, "CM"), syn.energies


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
