import numpy as np
import pytest
from sklearn.base import clone

from conftest import discrete_market
from hiddendrift import (CertaintyEquivalentPortfolio, GenericUtility, LogUtility, LogUtilityPortfolio,
                         MixtureFilter, PowerUtility, PowerUtilityPortfolio, log_strategy, optimal_claim,
                         power_strategy, simulate_paths, solve_lambda, wealth_step)
from hiddendrift.filters import log_mixture_density
from hiddendrift.strategies import check_claim_map


def test_wealth_step_examples():
    assert wealth_step(100.0, np.array([0.0]), 1.0, np.array([0.3])) == 100.0
    assert wealth_step(100.0, np.array([10.0]), 1.0, np.array([0.01])) == pytest.approx(100.1, abs=1e-12)


def test_log_strategy_examples():
    Q = np.array([[25.0]])
    np.testing.assert_array_equal(log_strategy(100.0, 1.0, np.array([0.0]), Q), [0.0])
    np.testing.assert_allclose(log_strategy(100.0, 1.0, np.array([0.1]), Q), [250.0])
    np.testing.assert_allclose(log_strategy(100.0, 1.0, np.array([-0.1]), Q), [-250.0])
    # delta shifts the wealth that is invested
    np.testing.assert_allclose(log_strategy(100.0, 2.0, np.array([0.1]), Q, delta=5.0), [275.0])


def test_power_strategy_examples():
    Q = np.array([[25.0]])
    np.testing.assert_allclose(power_strategy(2.0, 1.0, np.array([0.1]), Q, order=2), [2 * 2 * 25 * 0.1])
    np.testing.assert_array_equal(power_strategy(2.0, 1.0, np.array([0.0]), Q, order=3), [0.0])
    with pytest.raises(ValueError):
        power_strategy(2.0, 1.0, None, Q, order=2)


def test_lambda_closed_forms():
    assert solve_lambda(LogUtility(), initial_wealth=1.0) == 1.0
    G = np.exp(0.25)
    assert solve_lambda(PowerUtility(2), initial_wealth=1.0, G=G) == pytest.approx(np.sqrt(G), rel=1e-15)
    assert solve_lambda(PowerUtility(2), initial_wealth=4.0, G=G) == pytest.approx(np.sqrt(G) / 2, rel=1e-15)


def test_lambda_generic_bisection_matches_log():
    z = np.exp(np.random.default_rng(0).normal(-0.02, 0.2, 5000))
    z /= z.mean()
    u = GenericUtility(np.log, claim=lambda z, lam: z / lam)
    for X0 in (0.5, 1.0, 3.0):
        assert solve_lambda(u, z, initial_wealth=X0) == pytest.approx(1 / X0, abs=1e-6)


def test_lambda_generic_via_marginal():
    z = np.array([0.5, 1.0, 1.5])
    u = GenericUtility(lambda x: 2 * np.sqrt(x), marginal=lambda x: 1 / np.sqrt(x))
    lam = solve_lambda(u, z, initial_wealth=1.0)
    # claim map of 2 sqrt(x) is (z / lam)^2, so lam^2 = E z^2
    assert lam == pytest.approx(np.sqrt(np.mean(z ** 2)), rel=1e-8)


def test_optimal_claims():
    z = np.array([0.5, 1.0, 2.0])
    np.testing.assert_allclose(optimal_claim(LogUtility(), solve_lambda(LogUtility(), initial_wealth=2.0), z), 2 * z)
    G = 1.3
    lam = solve_lambda(PowerUtility(2), initial_wealth=2.0, G=G)
    np.testing.assert_allclose(optimal_claim(PowerUtility(2), lam, z), 2 * z ** 2 / G)
    assert optimal_claim(PowerUtility(2), solve_lambda(PowerUtility(2), initial_wealth=2.0, G=1.0), 1.0) == \
        pytest.approx(2.0)
    with pytest.raises(ValueError):
        optimal_claim(LogUtility(delta=1.0), 2.0, np.array([-1.0]))


def test_claim_map_beats_alternatives():
    x = np.linspace(0.01, 5, 200)
    for u in (LogUtility(0.5), PowerUtility(2), PowerUtility(4)):
        assert check_claim_map(u, 1.3, 0.8, x).all()


def test_log_wealth_tracks_mixture_density(three_atom):
    errs = []
    for dt in (2.0 ** -6, 2.0 ** -8, 2.0 ** -10):
        b = simulate_paths(three_atom, dt, 300, seed=1, measure="P")
        port = LogUtilityPortfolio(three_atom, delta=0.5).fit(b)
        tr = port.wealth_trace(b)
        zbar = np.exp(log_mixture_density(three_atom, b, terminal_only=True))
        np.testing.assert_allclose(tr.target, 1.5 * zbar - 0.5)
        errs.append(np.mean(np.abs(tr.terminal - tr.target)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 2e-2


def test_power_wealth_tracks_tilted_mixture(two_atom):
    errs = []
    for dt in (2.0 ** -6, 2.0 ** -8, 2.0 ** -10):
        b = simulate_paths(two_atom, dt, 300, seed=2)
        tr = PowerUtilityPortfolio(two_atom, order=2).fit(b).wealth_trace(b)
        errs.append(np.mean(np.abs(tr.terminal - tr.target)))
    assert errs[0] > errs[1] > errs[2]


def test_point_mass_power_target(point_mass):
    b = simulate_paths(point_mass, 2.0 ** -6, 20, seed=3)
    port = PowerUtilityPortfolio(point_mass, order=2).fit(b)
    assert port.G_ == pytest.approx(np.exp(0.25))
    assert port.expected_utility() == pytest.approx(2 * np.exp(0.125))
    zbar = np.exp(log_mixture_density(point_mass, b, terminal_only=True))
    np.testing.assert_allclose(port.wealth_trace(b).target, zbar ** 2 / np.exp(0.25))


def test_portfolio_estimator_api(three_atom, tmp_path):
    b = simulate_paths(three_atom, 2.0 ** -6, 50, seed=4)
    p = CertaintyEquivalentPortfolio(three_atom, filter=MixtureFilter(three_atom), scale=2.0)
    q = clone(p)
    assert q.get_params()["scale"] == 2.0
    q.fit(b)
    pos = q.predict(b)
    assert pos.shape == (50, 64, 1)
    assert np.isfinite(q.score(b))
    tr = q.wealth_trace(b)
    tr.to_csv(tmp_path / "w.csv")
    assert (tmp_path / "w.csv").read_text(encoding="utf-8").startswith("path,t,")


def test_floor_breaches_reported():
    m = discrete_market([-0.1, 0.0, 0.2])
    b = simulate_paths(m, 2.0 ** -6, 200, seed=5)
    tr = CertaintyEquivalentPortfolio(m, scale=20.0, floor=0.5).fit(b).wealth_trace(b)
    assert tr.floor_breaches.dtype == bool and tr.floor_breaches.any()
    assert "floor_breach_fraction" in tr.summary()
