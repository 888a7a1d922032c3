import numpy as np
import pytest

from conftest import discrete_market
from hiddendrift import GaussianPrior, LogUtility, MarketSpec, MarkovChainPrior, log_strategy, simulate_paths
from hiddendrift.filters import log_mixture_density
from hiddendrift.pde import (FDGrid, MarkovEmbedding, ValueFunction, build_embedding, default_fd_grid,
                             extract_strategy, feynman_kac_value, replicate, simulate_embedding, solve_cauchy_fd)
from hiddendrift.market import rate_integral


def _heat(sigma=0.2, horizon=1.0):
    return MarkovEmbedding(dim=1, n_stocks=1, drift=lambda y, t: np.zeros_like(y),
                           loading=lambda y, t: np.ones(y.shape + (1,)), terminal=lambda y: y[..., 0],
                           y0=np.zeros(1), sigma=lambda t: np.array([[sigma]]), horizon=horizon,
                           label="heat", time_dependent=False)


def test_single_atom_embedding_is_the_likelihood(point_mass):
    emb = build_embedding(point_mass, "finite_paths")
    assert emb.dim == 1 and emb.y0[0] == 1.0
    b = simulate_paths(point_mass, 2.0 ** -8, 10, seed=1)
    y = simulate_embedding(emb, b.increments, b.times)
    np.testing.assert_allclose(np.log(y[..., 0]), log_mixture_density(point_mass, b), atol=1e-12)


def test_log_coordinates_match_plain_coordinates(three_atom):
    b = simulate_paths(three_atom, 2.0 ** -8, 10, seed=2)
    plain = build_embedding(three_atom, "finite_paths")
    logc = build_embedding(three_atom, "finite_paths", log_coordinates=True)
    y1 = simulate_embedding(plain, b.increments, b.times)
    y2 = simulate_embedding(logc, b.increments, b.times)
    np.testing.assert_allclose(plain.terminal(y1[:, -1]), logc.terminal(y2[:, -1]), rtol=1e-12)


def test_kalman_embedding_static_coefficients(gaussian_market):
    emb = build_embedding(gaussian_market, "kalman_ou")
    assert emb.dim == 3
    grid, gam = emb.riccati_path
    y = np.array([[0.07, 0.3, 1.2]])
    t = grid[100]
    np.testing.assert_allclose(emb.drift(y, t)[0, 0], -gam[100, 0, 0] * 25 * 0.07, rtol=1e-12)
    np.testing.assert_allclose(emb.loading(y, t)[0, 0, 0], gam[100, 0, 0] * 25, rtol=1e-12)


def test_kalman_embedding_terminal_matches_exact_gaussian_density(gaussian_market):
    emb = build_embedding(gaussian_market, "kalman_ou")
    b = simulate_paths(gaussian_market, 2.0 ** -10, 50, seed=3)
    y = simulate_embedding(emb, b.increments, b.times)
    exact = np.exp(log_mixture_density(gaussian_market, b, terminal_only=True))
    assert np.max(np.abs(emb.terminal(y[:, -1]) / exact - 1)) < 2e-2


def test_chain_embedding_matches_mixture_density():
    chain = MarkovChainPrior(values=np.array([0.0, 0.2]), generator=np.zeros((2, 2)),
                             initial_probs=np.array([0.5, 0.5]))
    cm = MarketSpec(n_stocks=1, horizon=1.0, prior=chain, volatility=0.2)
    dm = discrete_market([0.0, 0.2])
    emb = build_embedding(cm, "markov_chain")
    assert emb.dim == 2 + 1 + 1
    errs = []
    for dt in (2.0 ** -6, 2.0 ** -9):
        b = simulate_paths(dm, dt, 200, seed=4)
        y = simulate_embedding(emb, b.increments, b.times)
        exact = np.exp(log_mixture_density(dm, b, terminal_only=True))
        errs.append(np.mean(np.abs(emb.terminal(y[:, -1]) / exact - 1)))
    assert errs[1] < errs[0] and errs[1] < 1e-2


def test_mismatched_prior_rejected(three_atom, gaussian_market):
    with pytest.raises(TypeError):
        build_embedding(gaussian_market, "finite_paths")
    with pytest.raises(TypeError):
        build_embedding(three_atom, "kalman_ou")
    with pytest.raises(ValueError):
        build_embedding(three_atom, "unknown")


# ---------------------------------------------------------------- Feynman-Kac


def test_fk_constant_claim_is_exact(three_atom):
    emb = build_embedding(three_atom, "finite_paths")
    fk = feynman_kac_value(emb, lambda y: np.full(y.shape[:-1], 2.5), emb.y0, 0.0, 100, seed=0, dt=2.0 ** -6)
    assert fk.value == 2.5 and fk.se == 0.0


def test_fk_linear_claim_is_a_martingale():
    fk = feynman_kac_value(_heat(), lambda y: 3 * y[..., 0] + 1, np.array([0.4]), 0.25, 20_000, seed=1,
                           dt=2.0 ** -6)
    assert abs(fk.value - 2.2) < 3 * fk.se


def test_fk_log_claim_meets_budget():
    m = discrete_market([-0.1, 0.2])
    emb = build_embedding(m, "finite_paths")
    fk = feynman_kac_value(emb, lambda y: LogUtility().claim_map(emb.terminal(y), 1.0), emb.y0, 0.0, 20_000,
                           seed=2, dt=2.0 ** -8)
    assert abs(fk.value - 1.0) < 3 * fk.se


# ---------------------------------------------------------------- finite differences


def test_fd_constant_claim_stays_constant(two_atom):
    emb = build_embedding(two_atom, "finite_paths", log_coordinates=True)
    grid = default_fd_grid(emb, 41, 16, store_every=4)
    v = solve_cauchy_fd(emb, lambda y: np.full(y.shape[0], 1.7), grid)
    np.testing.assert_allclose(v.values, 1.7, rtol=1e-13)


def test_fd_heat_matches_gaussian_convolution():
    s2, var = 0.3 ** 2, 0.04
    grid = FDGrid(lower=(-2.0,), upper=(2.0,), n_points=(801,), n_steps=200)
    v = solve_cauchy_fd(_heat(), lambda y: np.exp(-y[:, 0] ** 2 / (2 * s2)), grid)
    y = np.linspace(-0.8, 0.8, 33)[:, None]
    exact = np.sqrt(s2 / (s2 + var)) * np.exp(-y[:, 0] ** 2 / (2 * (s2 + var)))
    assert np.max(np.abs(v(y, 0.0) - exact)) < 1e-4


def test_fd_explicit_stability_violation_reports_steps():
    grid = FDGrid(lower=(-2.0,), upper=(2.0,), n_points=(801,), n_steps=4, theta=0.0, rannacher_steps=0)
    with pytest.raises(ValueError, match="n_steps >="):
        solve_cauchy_fd(_heat(), lambda y: y[:, 0], grid)


def test_fd_rejects_high_dimension():
    m = discrete_market([-0.1, 0.0, 0.1, 0.2])
    emb = build_embedding(m, "finite_paths")
    with pytest.raises(ValueError, match="Feynman-Kac"):
        solve_cauchy_fd(emb, emb.terminal, FDGrid((0,) * 4, (2,) * 4, (3,) * 4, 2))


def test_fd_matches_fk_for_power_claim(two_atom):
    emb = build_embedding(two_atom, "finite_paths", log_coordinates=True)
    G = (3 + np.e) / 4

    def claim(y):
        return emb.terminal(y) ** 2 / G

    grid = default_fd_grid(emb, 201, 128, store_every=8)
    v = solve_cauchy_fd(emb, claim, grid)
    y = np.array([0.0, 0.1])
    fk = feynman_kac_value(emb, claim, y, 0.5, 20_000, seed=3, dt=2.0 ** -8)
    assert abs(v(y, 0.5)[0] - fk.value) < 3 * fk.se + 1e-2


def test_value_function_roundtrip_and_domain(tmp_path):
    grid = FDGrid(lower=(-1.0,), upper=(1.0,), n_points=(21,), n_steps=4)
    v = solve_cauchy_fd(_heat(), lambda y: y[:, 0] ** 2, grid)
    npy, meta = v.save(tmp_path / "grid")
    assert npy.suffix == ".npy" and meta.suffix == ".json"
    back = ValueFunction.load(tmp_path / "grid")
    np.testing.assert_array_equal(back.values, v.values)
    with pytest.raises(ValueError, match="outside"):
        v(np.array([[1.5]]), 0.0)


def test_constant_claim_gives_zero_strategy(two_atom):
    emb = build_embedding(two_atom, "finite_paths", log_coordinates=True)
    grid = default_fd_grid(emb, 41, 8)
    v = solve_cauchy_fd(emb, lambda y: np.ones(y.shape[0]), grid)
    np.testing.assert_allclose(extract_strategy(emb, v, emb.y0[None], 0.0, 1.0), 0.0, atol=1e-12)


def test_extracted_log_strategy_matches_closed_form(point_mass):
    emb = build_embedding(point_mass, "finite_paths")
    grid = FDGrid(lower=(0.0,), upper=(4.0,), n_points=(201,), n_steps=32)
    v = solve_cauchy_fd(emb, lambda y: emb.terminal(y), grid)
    b = simulate_paths(point_mass, 2.0 ** -8, 20, seed=5)
    y = simulate_embedding(emb, b.increments, b.times)
    Q = np.array([[25.0]])
    for k in (0, 64, 200):
        pi = extract_strategy(emb, v, y[:, k], b.times[k], 1.0)
        np.testing.assert_allclose(pi, log_strategy(y[:, k, 0], 1.0, np.array([0.1]), Q), rtol=1e-8, atol=1e-10)


def test_replication_error_shrinks_with_dt(two_atom):
    emb = build_embedding(two_atom, "finite_paths", log_coordinates=True)
    G = (3 + np.e) / 4
    v = solve_cauchy_fd(emb, lambda y: emb.terminal(y) ** 2 / G, default_fd_grid(emb, 201, 128))
    errs = []
    for dt, r in ((2.0 ** -7, 2), (2.0 ** -8, 1)):
        b = simulate_paths(two_atom, dt, 400, seed=6, refine=r)
        target = np.exp(2 * log_mixture_density(two_atom, b, terminal_only=True)) / G
        tr = replicate(emb, v, b.increments, b.times, rate_integral(b), 1.0, target)
        errs.append(tr.replication_error.mean())
    assert errs[1] < errs[0]
