import numpy as np
import pytest
from scipy.linalg import expm
from scipy.stats import norm
from sklearn.base import clone

from conftest import discrete_market
from hiddendrift import (ConstantDriftFilter, DiscretePrior, GaussianPrior, KalmanBucyFilter, LaggedFilter,
                         MarketSpec, MarkovChainPrior, MixtureFilter, OUPrior, PowerEquivalenceFilter,
                         WonhamFilter, build_tilted_prior, gauss_hermite_prior, gaussian_grid_prior,
                         kalman_step, riccati_integrate, simulate_paths, wonham_step)
from hiddendrift.filters import GaussianState, SimplexState, riccati_rhs


# ---------------------------------------------------------------- mixture


def test_mixture_starts_at_prior_mean(three_atom):
    b = simulate_paths(three_atom, 2.0 ** -6, 5, seed=1)
    ahat = MixtureFilter(three_atom).fit(b).transform(b)
    np.testing.assert_allclose(ahat[:, 0, 0], 0.1 / 3, atol=1e-15)


def test_symmetric_prior_negation_symmetry():
    m = discrete_market([-0.15, 0.15])
    b = simulate_paths(m, 2.0 ** -6, 5, seed=2)
    f = MixtureFilter(m).fit(b)
    np.testing.assert_allclose(f.transform(-b.r_tilde), -f.transform(b.r_tilde), atol=1e-14)


def test_mixture_matches_brute_force_gaussian_likelihood(two_atom):
    b = simulate_paths(two_atom, 2.0 ** -8, 1, seed=3)
    ahat = MixtureFilter(two_atom).fit(b).transform(b)[0, :, 0]
    dR = b.increments[0, :, 0]
    # each increment is N(theta dt, sigma^2 dt) under atom theta
    loglik = np.stack([np.concatenate([[0.0], np.cumsum(norm.logpdf(dR, th * b.dt, 0.2 * np.sqrt(b.dt)))])
                       for th in (0.0, 0.2)])
    post = np.exp(loglik - loglik.max(axis=0))
    post /= post.sum(axis=0)
    np.testing.assert_allclose(ahat, 0.2 * post[1], atol=1e-10)


def test_mixture_filter_is_a_transformer(three_atom):
    f = MixtureFilter(three_atom)
    g = clone(f)
    assert g.get_params()["market"].n_stocks == 1 and not hasattr(g, "times_")
    b = simulate_paths(three_atom, 2.0 ** -4, 3, seed=4)
    assert g.fit_transform(b).shape == (3, 17, 1)
    c = simulate_paths(three_atom, 2.0 ** -5, 3, seed=4)
    with pytest.raises(ValueError):
        g.transform(c)


# ---------------------------------------------------------------- Riccati / Kalman


def test_riccati_scalar_closed_form():
    t = np.linspace(0.0, 1.0, 1001)
    v, q = 0.05 ** 2, 25.0
    gam = riccati_integrate(v, t, q)[:, 0, 0]
    assert np.max(np.abs(gam - v / (1 + v * q * t))) < 1e-8


def test_riccati_zero_fixed_point():
    gam = riccati_integrate(0.0, np.linspace(0, 1, 11), 25.0)
    assert np.all(gam == 0.0)


def test_riccati_reaches_algebraic_fixed_point():
    t = np.linspace(0.0, 50.0, 50_001)
    gam = riccati_integrate(0.0, t, 25.0, alpha=0.5, beta=0.3)
    res = riccati_rhs(gam[-1], np.array([[25.0]]), np.array([[0.5]]), np.array([[0.09]]))
    assert np.abs(res).max() < 1e-6
    # positive root of -q g^2 - 2 a g + b^2 = 0
    np.testing.assert_allclose(gam[-1, 0, 0], (-0.5 + np.sqrt(0.25 + 25 * 0.09)) / 25, rtol=1e-9)


def test_riccati_blow_up_detected():
    with pytest.raises(FloatingPointError):
        riccati_integrate(1.0, np.linspace(0, 1, 11), -200.0, bound=1e3)


def test_riccati_matrix_solution_stays_symmetric_psd():
    t = np.linspace(0, 2, 201)
    gam = riccati_integrate(np.diag([0.01, 0.02]), t, [[25.0, 5.0], [5.0, 30.0]],
                            alpha=[[0.5, 0.1], [0.0, 0.3]], beta=[[0.1, 0.0], [0.05, 0.2]])
    np.testing.assert_allclose(gam, np.swapaxes(gam, 1, 2))
    assert np.linalg.eigvalsh(gam).min() >= -1e-14


def test_kalman_zero_uncertainty_is_deterministic_ode():
    prior = OUPrior(alpha=1.5, beta=0.0, b=0.0, delta=[0.05], mean0=[0.2], cov0=0.0, beta_inv_bound=None)
    state = GaussianState(mean=np.array([[0.2], [0.2]]), cov=np.zeros((1, 1)))
    dt = 0.01
    expected = 0.2
    rng = np.random.default_rng(0)
    for _ in range(100):
        state = kalman_step(state, prior, np.array([[25.0]]), rng.normal(size=(2, 1)) * 0.02, dt)
        expected += 1.5 * (0.05 - expected) * dt
    np.testing.assert_allclose(state.mean, expected, atol=1e-14)
    assert np.all(state.cov == 0)


def test_kalman_matches_grid_bayes(gaussian_market):
    b = simulate_paths(gaussian_market, 2.0 ** -10, 100, seed=11)
    a_k = KalmanBucyFilter(gaussian_market).fit(b).transform(b)
    grid = gaussian_grid_prior(gaussian_market.prior, n_atoms=201)
    a_g = MixtureFilter(gaussian_market, prior=grid).fit(b).transform(b)
    assert np.abs(a_k - a_g).max() < 1e-3


def test_kalman_path_dependent_vol_integrates_per_path():
    spec = MarketSpec(n_stocks=1, horizon=1.0, prior=GaussianPrior(mean=[0.1], cov=0.05 ** 2),
                      volatility=lambda t, h: 0.2 + 0.05 * np.tanh(h[:, -1, 0]), vol_depends_on_path=True)
    b = simulate_paths(spec, 2.0 ** -6, 4, seed=1)
    tr = KalmanBucyFilter(spec).fit(b).trace(b)
    assert tr.aux["gamma"].shape == (4, 65, 1, 1)
    assert np.all(np.diff(tr.aux["gamma"][..., 0, 0], axis=1) <= 0)


# ---------------------------------------------------------------- Wonham


def _chain_market(values, generator, p0):
    chain = MarkovChainPrior(values=np.asarray(values, float), generator=np.asarray(generator, float),
                             initial_probs=np.asarray(p0, float))
    return MarketSpec(n_stocks=1, horizon=1.0, prior=chain, volatility=0.2)


def test_wonham_simplex_preserved_on_many_paths():
    m = _chain_market([-0.3, 0.1, 0.4], [[-2, 1, 1], [0.5, -1, 0.5], [3, 0, -3]], [0.2, 0.5, 0.3])
    b = simulate_paths(m, 2.0 ** -8, 10_000, seed=2)
    p = WonhamFilter(m).fit(b).trace(b).aux["prob"]
    assert p.min() >= 0.0 and p.max() <= 1.0
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_wonham_uninformative_matches_matrix_exponential():
    L = np.array([[-1.0, 0.7, 0.3], [0.2, -0.5, 0.3], [0.4, 0.6, -1.0]])
    p0 = np.array([0.6, 0.3, 0.1])
    m = _chain_market([0.1, 0.1, 0.1], L, p0)
    b = simulate_paths(m, 2.0 ** -8, 20, seed=3)
    p = WonhamFilter(m).fit(b).trace(b).aux["prob"]
    np.testing.assert_allclose(p[:, -1], np.broadcast_to(p0 @ expm(L), (20, 3)), atol=1e-6)


def test_wonham_point_mass_is_absorbing():
    m = _chain_market([-0.1, 0.2], np.zeros((2, 2)), [1.0, 0.0])
    b = simulate_paths(m, 2.0 ** -6, 10, seed=4)
    p = WonhamFilter(m).fit(b).trace(b).aux["prob"]
    np.testing.assert_array_equal(p[..., 0], 1.0)


def test_wonham_single_step_api():
    chain = MarkovChainPrior(values=np.array([0.0, 0.2]), generator=np.zeros((2, 2)),
                             initial_probs=np.array([0.5, 0.5]))
    s = SimplexState(probs=np.array([[0.5, 0.5]]), ahat=np.array([[0.1]]))
    s2 = wonham_step(s, chain, np.zeros((1, 1)), np.array([[0.05]]), np.array([[25.0]]), 0.01)
    assert s2.probs[0, 1] > 0.5 and s2.t == pytest.approx(0.01)


def test_frozen_chain_approaches_mixture_filter():
    chain = _chain_market([0.0, 0.2], np.zeros((2, 2)), [0.5, 0.5])
    mix = discrete_market([0.0, 0.2])
    errs = []
    for dt in (2.0 ** -6, 2.0 ** -8, 2.0 ** -10):
        b = simulate_paths(mix, dt, 200, seed=5)
        a_w = WonhamFilter(chain).fit(b).transform(b)
        a_m = MixtureFilter(mix).fit(b).transform(b)
        errs.append(np.abs(a_w - a_m).max(axis=1).mean())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3


# ---------------------------------------------------------------- tilted prior and power filter


def test_tilted_point_mass():
    tp = build_tilted_prior(DiscretePrior(atoms=[[0.1]], probs=[1.0]), np.array([[25.0]]), 1.0, 2)
    assert tp.G == pytest.approx(np.exp(0.25), rel=1e-14)
    np.testing.assert_allclose(tp.support[:, 0], [[0.2]])


def test_tilted_without_tilt_is_convolution():
    prior = DiscretePrior(atoms=[[0.0], [0.1]], probs=[0.25, 0.75])
    tp = build_tilted_prior(prior, np.zeros((1, 1)), 1.0, 3)
    assert tp.G == pytest.approx(1.0)
    conv = np.convolve(np.convolve([0.25, 0.75], [0.25, 0.75]), [0.25, 0.75])
    np.testing.assert_allclose(tp.weights, conv)
    np.testing.assert_allclose(tp.support[:, 0, 0], [0.0, 0.1, 0.2, 0.3], atol=1e-15)


def test_tilted_two_atom_exact_enumeration():
    tp = build_tilted_prior(DiscretePrior(atoms=[[0.0], [0.2]], probs=[0.5, 0.5]), np.array([[25.0]]), 1.0, 2)
    # pairs (0,0),(0,.2),(.2,0),(.2,.2); only the last has a cross term 25 * 0.04
    assert tp.G == pytest.approx((3 + np.e) / 4, rel=1e-14)
    np.testing.assert_allclose(tp.weights, np.array([1, 2, np.e]) / (3 + np.e))


def test_tilted_gaussian_matches_dense_quadrature():
    prior = GaussianPrior(mean=[0.1], cov=0.1 ** 2)
    tp = build_tilted_prior(prior, np.array([[25.0]]), 1.0, 2)
    gh = gauss_hermite_prior(prior, n_nodes=64)
    th = np.array([a[0] for a in gh.atoms])
    w = gh.probs[:, None] * gh.probs[None] * np.exp(25 * th[:, None] * th[None])
    G = w.sum()
    mean = (w * (th[:, None] + th[None])).sum() / G
    assert tp.G == pytest.approx(G, rel=1e-6)
    assert tp.mean[0] == pytest.approx(mean, rel=1e-6)
    grid = build_tilted_prior(gaussian_grid_prior(prior, 201), np.array([[25.0]]), 1.0, 2)
    assert grid.G == pytest.approx(G, rel=1e-6)


def test_tilted_gaussian_infinite_normalizer():
    with pytest.raises(ValueError, match="G infinite"):
        build_tilted_prior(GaussianPrior(mean=[0.1], cov=0.3 ** 2), np.array([[25.0]]), 1.0, 2)


def test_power_filter_point_mass_recovers_true_drift(point_mass):
    b = simulate_paths(point_mass, 2.0 ** -6, 5, seed=6)
    np.testing.assert_allclose(PowerEquivalenceFilter(point_mass).fit(b).transform(b), 0.1, atol=1e-14)


def test_power_filter_starts_at_tilted_mean_over_order(two_atom):
    b = simulate_paths(two_atom, 2.0 ** -6, 5, seed=7)
    f = PowerEquivalenceFilter(two_atom, order=2).fit(b)
    expected = (2 * 0.2 + np.e * 0.4) / (3 + np.e) / 2
    np.testing.assert_allclose(f.transform(b)[:, 0, 0], expected, rtol=1e-12)


def test_power_filter_differs_from_bayes(two_atom):
    b = simulate_paths(two_atom, 2.0 ** -8, 1, seed=8)
    a_pow = PowerEquivalenceFilter(two_atom).fit(b).transform(b)
    a_bay = MixtureFilter(two_atom).fit(b).transform(b)
    K = b.n_steps
    assert np.abs(a_pow - a_bay)[0, : K // 2].min() > 1e-2


def test_power_filter_meets_bayes_at_horizon(two_atom):
    # at T the tilted pair posterior factors into two Bayes posteriors
    b = simulate_paths(two_atom, 2.0 ** -8, 50, seed=8)
    a_pow = PowerEquivalenceFilter(two_atom).fit(b).transform(b)
    a_bay = MixtureFilter(two_atom).fit(b).transform(b)
    np.testing.assert_allclose(a_pow[:, -1], a_bay[:, -1], atol=1e-12)


def test_power_gaussian_filter_is_conjugate():
    m = MarketSpec(n_stocks=1, horizon=1.0, prior=GaussianPrior(mean=[0.1], cov=0.1 ** 2), volatility=0.2)
    b = simulate_paths(m, 2.0 ** -8, 3, seed=9)
    exact = PowerEquivalenceFilter(m).fit(b).transform(b)
    grid = gaussian_grid_prior(m.prior, 401)
    tilted = build_tilted_prior(grid, np.array([[25.0]]), 1.0, 2)
    assert tilted.G == pytest.approx(PowerEquivalenceFilter(m).fit(b).tilted_.G, rel=1e-6)
    approx = PowerEquivalenceFilter(m, prior=grid).fit(b).transform(b)
    np.testing.assert_allclose(exact, approx, atol=1e-5)


# ---------------------------------------------------------------- simple competitors


def test_constant_and_lagged_filters(three_atom):
    b = simulate_paths(three_atom, 2.0 ** -4, 3, seed=10)
    np.testing.assert_allclose(ConstantDriftFilter(three_atom).fit(b).transform(b), 0.1 / 3)
    np.testing.assert_allclose(ConstantDriftFilter(three_atom, value=0.0).fit(b).transform(b), 0.0)
    base = MixtureFilter(three_atom).fit(b).transform(b)
    lag = LaggedFilter(three_atom, lag=4).fit(b).transform(b)
    np.testing.assert_allclose(lag[:, 4:], base[:, :-4])
    np.testing.assert_allclose(lag[:, :4], base[:, :1].repeat(4, axis=1))


def test_filter_trace_csv(tmp_path, three_atom):
    b = simulate_paths(three_atom, 0.25, 2, seed=1)
    MixtureFilter(three_atom).fit(b).trace(b).to_csv(tmp_path / "f.csv", path_offset=10)
    rows = (tmp_path / "f.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0].startswith("path,t,ahat_1")
    assert rows[1].startswith("10,0.0,")
