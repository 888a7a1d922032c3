import sys

import numpy as np
import pytest

from hiddendrift import DiscretePrior, GaussianPrior, MarketSpec

THIRD = 1.0 / 3.0


def discrete_market(atoms, probs=None, sigma=0.2, horizon=1.0, **kw):
    probs = np.full(len(atoms), 1.0 / len(atoms)) if probs is None else np.asarray(probs, float)
    return MarketSpec(n_stocks=1, horizon=horizon, prior=DiscretePrior(atoms=[[a] for a in atoms], probs=probs),
                      volatility=sigma, **kw)


@pytest.fixture
def three_atom():
    return discrete_market([-0.1, 0.0, 0.2])


@pytest.fixture
def two_atom():
    return discrete_market([0.0, 0.2])


@pytest.fixture
def point_mass():
    return discrete_market([0.1])


@pytest.fixture
def zero_drift():
    return discrete_market([0.0])


@pytest.fixture
def gaussian_market():
    return MarketSpec(n_stocks=1, horizon=1.0, prior=GaussianPrior(mean=[0.1], cov=0.05 ** 2), volatility=0.2)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = sorted(getattr(acceptance, "RESULT_LINES", []), key=lambda s: int(s.split()[1]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
