"""Posterior-mean drift filters.

Every filter is a scikit-learn style transformer. ``fit`` records the time
grid and precomputes anything that does not depend on the observed path (the
Riccati solution, the tilted prior). ``transform`` maps excess-return paths of
shape ``(n_paths, K + 1, n)`` to drift estimates of the same shape, and
``trace`` returns the estimates together with the auxiliary filter state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_paths, check_same_grid
from .likelihood import (LikelihoodState, accumulate_log_z, gaussian_log_zbar, log_z_increments,
                         mixture_log_density, posterior_weights, zbar_exponential)
from .market import MarketSpec, precision_path
from .priors import DiscretePrior, GaussianPrior, MarkovChainPrior, OUPrior

SIMPLEX_TOL = 1e-9
PSD_TOL = 1e-10
MAX_TUPLES = 2_000_000


# ---------------------------------------------------------------- states


@dataclass(frozen=True)
class MixtureState:
    weights: np.ndarray
    ahat: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class GaussianState:
    """Conditional mean ``mean`` (``(N, n)``) and covariance ``cov`` (``(n, n)`` or ``(N, n, n)``)."""

    mean: np.ndarray
    cov: np.ndarray
    t: float = 0.0

    @property
    def ahat(self) -> np.ndarray:
        return self.mean


@dataclass(frozen=True)
class SimplexState:
    """Chain-state probabilities ``probs`` (``(N, d)``) and the implied drift estimate."""

    probs: np.ndarray
    ahat: np.ndarray
    t: float = 0.0


FilterState = MixtureState | GaussianState | SimplexState


@dataclass
class FilterTrace:
    """Filter output on a grid: ``ahat`` is ``(N, K + 1, n)``; ``aux`` holds named state arrays."""

    times: np.ndarray
    ahat: np.ndarray
    variant: str
    aux: dict = field(default_factory=dict)

    def to_csv(self, path, path_offset: int = 0) -> None:
        """One row per (path, time): estimates, variant, then auxiliary state columns."""
        N, K1, n = self.ahat.shape
        cols = ["path", "t"] + [f"ahat_{i + 1}" for i in range(n)]
        blocks = [np.repeat(np.arange(path_offset, path_offset + N), K1)[:, None],
                  np.tile(self.times, N)[:, None], self.ahat.reshape(N * K1, n)]
        for name, arr in self.aux.items():
            arr = np.asarray(arr)
            if arr.shape[:2] == (N, K1):
                flat = arr.reshape(N * K1, -1)
            elif arr.shape[0] == K1:
                flat = np.tile(arr.reshape(K1, -1), (N, 1))
            else:
                continue
            cols += [f"{name}_{j + 1}" for j in range(flat.shape[1])]
            blocks.append(flat)
        data = np.hstack(blocks)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(cols[:2 + n] + ["variant"] + cols[2 + n:]) + "\n")
            for row in data:
                head = [str(int(row[0]))] + [repr(float(v)) for v in row[1:2 + n]]
                tail = [repr(float(v)) for v in row[2 + n:]]
                fh.write(",".join(head + [self.variant] + tail) + "\n")


def export_riccati_csv(times: np.ndarray, gamma: np.ndarray, path) -> None:
    """Write a Riccati path ``gamma`` (``(K + 1, n, n)``) as ``t, gamma_ij`` rows."""
    n = gamma.shape[-1]
    cols = ["t"] + [f"gamma_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
    data = np.column_stack([times, gamma.reshape(times.size, n * n)])
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g",
               encoding="utf-8")


# ---------------------------------------------------------------- mixture


def mixture_posterior_mean(state: LikelihoodState, drift: np.ndarray) -> np.ndarray:
    """``sum_i w_i z_i A_i / sum_i w_i z_i`` for atom drifts ``drift`` of shape ``(d, n)``."""
    return state.posterior() @ np.asarray(drift, dtype=float).reshape(state.weights.size, -1)


def _mixture_trace(drift_paths, log_weights, Q, dR, dt):
    """Posterior weights, mean and ``log Zbar`` over a finite support of drift paths."""
    log_z = accumulate_log_z(drift_paths[:, :-1], Q, dR, dt)
    w = posterior_weights(log_weights, log_z)
    ahat = np.einsum("nkd,dki->nki", w, drift_paths)
    return w, ahat, mixture_log_density(log_weights, log_z)


def _resolve_prior(market: MarketSpec, prior):
    return market.prior if prior is None else prior


class _GridFilter(TransformerMixin, BaseEstimator):
    """Shared fit/transform plumbing: the fitted grid is reused by ``transform``."""

    def fit(self, X, y=None):
        r, times = check_paths(X, self.market.horizon, self.market.n_stocks)
        self.times_ = times
        self.dt_ = float(times[1] - times[0])
        self.n_steps_ = times.size - 1
        self._fit_grid(r, times)
        return self

    def _fit_grid(self, r, times):
        pass

    def _checked(self, X):
        check_is_fitted(self)
        r, times = check_paths(X, self.market.horizon, self.market.n_stocks)
        check_same_grid(times, self.times_)
        return r

    def transform(self, X):
        return self.trace(X).ahat

    def _precision(self, r):
        return precision_path(self.market, r, self.times_)


class MixtureFilter(_GridFilter):
    """Exact Bayes filter for a finite prior support.

    A Gaussian prior must be discretized first (``gaussian_grid_prior`` or
    ``gauss_hermite_prior``).
    """

    def __init__(self, market: MarketSpec, prior=None):
        self.market = market
        self.prior = prior

    def _fit_grid(self, r, times):
        prior = _resolve_prior(self.market, self.prior)
        if not isinstance(prior, DiscretePrior):
            raise TypeError("MixtureFilter needs a DiscretePrior; discretize Gaussian priors first")
        self.drift_paths_ = prior.drift_paths(times, self.market.n_stocks)
        self.log_weights_ = np.log(prior.probs)

    def trace(self, X) -> FilterTrace:
        r = self._checked(X)
        w, ahat, log_zbar = _mixture_trace(self.drift_paths_, self.log_weights_,
                                           self._precision(r), np.diff(r, axis=1), self.dt_)
        return FilterTrace(self.times_, ahat, "mixture", {"weight": w, "log_zbar": log_zbar})


# ---------------------------------------------------------------- Kalman-Bucy


def _const_or_call(value, t):
    return value(t) if callable(value) else value


def riccati_rhs(gamma, Q, alpha, bb):
    """``-gamma Q gamma - alpha gamma - gamma alpha^T + beta beta^T`` (batched over leading axes)."""
    return -gamma @ Q @ gamma - alpha @ gamma - gamma @ np.swapaxes(alpha, -1, -2) + bb


def _riccati_rk4(gamma, t, h, Q, alpha, beta):
    def rhs(s, g):
        a = _const_or_call(alpha, s)
        b = _const_or_call(beta, s)
        return riccati_rhs(g, _const_or_call(Q, s), a, b @ np.swapaxes(b, -1, -2))

    k1 = rhs(t, gamma)
    k2 = rhs(t + h / 2, gamma + h / 2 * k1)
    k3 = rhs(t + h / 2, gamma + h / 2 * k2)
    k4 = rhs(t + h, gamma + h * k3)
    out = gamma + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _check_gamma(gamma, t, bound):
    norm = np.abs(gamma).max()
    if not np.isfinite(norm) or norm > bound:
        raise FloatingPointError(f"Riccati solution blew up at t={t:.6g} (|gamma| > {bound:g})")
    lam = np.linalg.eigvalsh(gamma)[..., 0]
    if np.min(lam) < -PSD_TOL * (1.0 + norm):
        raise FloatingPointError(
            f"Riccati solution lost positive semidefiniteness at t={t:.6g}; reduce dt")


def _as_square(value, n):
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    return arr * np.eye(n) if arr.ndim == 0 else arr.reshape(n, n)


def riccati_integrate(gamma0, times, Q, alpha=0.0, beta=0.0, bound: float = 1e8,
                      substeps: int = 1) -> np.ndarray:
    """RK4 solution of the filter Riccati equation on ``times``; shape ``(K + 1, n, n)``.

    ``Q``, ``alpha`` and ``beta`` are matrices or callables of ``t``. The
    solution is symmetrized after every step.
    """
    gamma = np.atleast_2d(np.asarray(gamma0, dtype=float))
    n = gamma.shape[-1]
    Q, alpha, beta = _as_square(Q, n), _as_square(alpha, n), _as_square(beta, n)
    _check_gamma(gamma, float(times[0]), bound)
    out = np.empty((len(times), n, n))
    out[0] = gamma
    for k in range(len(times) - 1):
        h = (times[k + 1] - times[k]) / substeps
        for j in range(substeps):
            gamma = _riccati_rk4(gamma, times[k] + j * h, h, Q, alpha, beta)
        _check_gamma(gamma, float(times[k + 1]), bound)
        out[k + 1] = gamma
    return out


def kalman_step(state: GaussianState, prior: OUPrior, Q, dR, dt: float,
                next_cov: np.ndarray | None = None) -> GaussianState:
    """One observation step of the Kalman-Bucy filter.

    Mean: ``y += alpha (delta - y) dt + b dR + gamma Q (dR - y dt)``.
    Covariance: RK4 over ``[t, t + dt]`` unless ``next_cov`` is supplied
    (a precomputed Riccati path). ``Q`` may be a callable of ``t``.
    """
    t = state.t
    y = np.atleast_2d(state.mean)
    Qt = _const_or_call(Q, t)
    alpha, delta, b = prior.alpha_fn(t), prior.delta_fn(t), prior.b_fn(t)
    innov = np.atleast_2d(dR) - y * dt
    gain = state.cov @ Qt
    corr = np.einsum("...ij,...j->...i", gain, innov)
    mean = y + (delta - y) @ alpha.T * dt + np.atleast_2d(dR) @ b.T + corr
    if next_cov is None:
        next_cov = _riccati_rk4(state.cov, t, dt, Q, prior.alpha_fn, prior.beta_fn)
        _check_gamma(next_cov, t + dt, 1e8)
    return GaussianState(mean=mean, cov=next_cov, t=t + dt)


class KalmanBucyFilter(_GridFilter):
    """Kalman-Bucy filter for static Gaussian and linear (OU) drift priors.

    With deterministic volatility the Riccati path is computed once in
    ``fit``; with path-dependent volatility it is integrated per path with
    ``Q`` frozen over each step.
    """

    def __init__(self, market: MarketSpec, prior=None, riccati_substeps: int = 1):
        self.market = market
        self.prior = prior
        self.riccati_substeps = riccati_substeps

    def _ou(self) -> OUPrior:
        prior = _resolve_prior(self.market, self.prior)
        if isinstance(prior, GaussianPrior):
            return prior.as_ou()
        if not isinstance(prior, OUPrior):
            raise TypeError("KalmanBucyFilter needs a GaussianPrior or OUPrior")
        return prior

    def _fit_grid(self, r, times):
        ou = self._ou()
        self.ou_prior_ = ou
        if self.market.deterministic_vol:
            self.cov_ = riccati_integrate(ou.cov0, times, self.market.precision, ou.alpha_fn,
                                          ou.beta_fn, substeps=self.riccati_substeps)
        else:
            self.cov_ = None

    def trace(self, X) -> FilterTrace:
        r = self._checked(X)
        ou, dt = self.ou_prior_, self.dt_
        dR = np.diff(r, axis=1)
        Q = self._precision(r)
        N, K = dR.shape[:2]
        n = self.market.n_stocks
        ahat = np.empty((N, K + 1, n))
        ahat[:, 0] = ou.mean0
        if self.cov_ is not None:
            state = GaussianState(np.broadcast_to(ou.mean0, (N, n)).copy(), self.cov_[0])
            for k in range(K):
                state = kalman_step(state, ou, Q[k], dR[:, k], dt, next_cov=self.cov_[k + 1])
                ahat[:, k + 1] = state.mean
            return FilterTrace(self.times_, ahat, "kalman", {"gamma": self.cov_})
        cov = np.empty((N, K + 1, n, n))
        cov[:, 0] = ou.cov0
        state = GaussianState(np.broadcast_to(ou.mean0, (N, n)).copy(),
                              np.broadcast_to(ou.cov0, (N, n, n)).copy())
        for k in range(K):
            state = kalman_step(state, ou, Q[:, k], dR[:, k], dt)
            ahat[:, k + 1] = state.mean
            cov[:, k + 1] = state.cov
        return FilterTrace(self.times_, ahat, "kalman", {"gamma": cov})


# ---------------------------------------------------------------- Wonham


def _project_simplex(y):
    y = np.clip(y, 0.0, 1.0)
    total = y.sum(axis=-1, keepdims=True)
    return np.where(total > 0, y / np.where(total > 0, total, 1.0), 1.0 / y.shape[-1])


def _forward_flow(y, chain: MarkovChainPrior, t, h):
    """RK4 step of ``dy/dt = L(t)^T y`` (row-vector form ``y L``)."""
    def rhs(s, v):
        return v @ chain.generator_at(s)

    k1 = rhs(t, y)
    k2 = rhs(t + h / 2, y + h / 2 * k1)
    k3 = rhs(t + h / 2, y + h / 2 * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def wonham_step(state: SimplexState, chain: MarkovChainPrior, r_tilde, dR, Q, dt: float) -> SimplexState:
    """One step of the Wonham filter, followed by clamping to ``[0, 1]`` and renormalizing.

    ``r_tilde`` is the current excess-return level (``(N, n)``), used by the
    chain's drift map; the innovation uses left-point values.
    """
    t = state.t
    y = np.atleast_2d(state.probs)
    vals = chain.drift_values(t, np.atleast_2d(r_tilde))
    ahat = np.einsum("nd,ndi->ni", y, vals)
    innov = np.atleast_2d(dR) - ahat * dt
    Qt = np.asarray(Q)
    dev = vals - ahat[:, None, :]
    score = np.einsum("ndi,...ij,nj->nd", dev, Qt, innov) if Qt.ndim == 2 else \
        np.einsum("ndi,nij,nj->nd", dev, Qt, innov)
    y_new = _project_simplex(_forward_flow(y, chain, t, dt) + y * score)
    return SimplexState(probs=y_new, ahat=ahat, t=t + dt)


class WonhamFilter(_GridFilter):
    """Filter for a drift driven by a finite-state Markov chain."""

    def __init__(self, market: MarketSpec, prior=None):
        self.market = market
        self.prior = prior

    def _fit_grid(self, r, times):
        prior = _resolve_prior(self.market, self.prior)
        if not isinstance(prior, MarkovChainPrior):
            raise TypeError("WonhamFilter needs a MarkovChainPrior")
        self.chain_ = prior

    def trace(self, X) -> FilterTrace:
        r = self._checked(X)
        chain, dt, times = self.chain_, self.dt_, self.times_
        dR = np.diff(r, axis=1)
        Q = self._precision(r)
        N, K = dR.shape[:2]
        d = chain.n_states
        probs = np.empty((N, K + 1, d))
        ahat = np.empty((N, K + 1, self.market.n_stocks))
        state = SimplexState(np.broadcast_to(chain.initial_probs, (N, d)).copy(), None, times[0])
        probs[:, 0] = state.probs
        for k in range(K):
            Qk = Q[k] if Q.ndim == 3 else Q[:, k]
            state = wonham_step(state, chain, r[:, k], dR[:, k], Qk, dt)
            ahat[:, k] = state.ahat
            probs[:, k + 1] = state.probs
        vals = chain.drift_values(times[-1], r[:, -1])
        ahat[:, -1] = np.einsum("nd,ndi->ni", state.probs, vals)
        return FilterTrace(times, ahat, "wonham", {"prob": probs})


# ---------------------------------------------------------------- tilted prior


@dataclass(frozen=True)
class TiltedPrior:
    """Law of the sum of ``order`` tilted parameter draws and its normalizer ``G``.

    Discrete case: ``support`` holds the drift paths of the distinct sums on
    ``times`` (``(m, K + 1, n)``) and ``weights`` their masses. Gaussian case:
    the law is ``N(mean, cov)`` and ``support``/``weights`` are ``None``.
    """

    order: int
    G: float
    times: np.ndarray
    support: np.ndarray | None = None
    weights: np.ndarray | None = None
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None

    @property
    def gaussian(self) -> bool:
        return self.support is None

    def mean_at(self, k: int = 0) -> np.ndarray:
        return self.mean if self.gaussian else self.weights @ self.support[:, k]


def _integrated_precision(Q_path, times):
    Q_path = np.asarray(Q_path, dtype=float)
    dts = np.diff(times)
    if Q_path.ndim == 2:
        return np.broadcast_to(Q_path, (dts.size,) + Q_path.shape), Q_path * (times[-1] - times[0])
    if Q_path.shape[0] != dts.size:
        raise ValueError("Q_path must have one matrix per grid step")
    return Q_path, np.einsum("k,kij->ij", dts, Q_path)


def build_tilted_prior(prior, Q_path, T: float, order: int, times=None) -> TiltedPrior:
    """Tilted law of ``theta_1 + ... + theta_l`` and its normalizer ``G``.

    ``Q_path`` is a constant precision matrix or one matrix per grid step
    (left points). With ``times`` omitted, the grid is ``linspace(0, T, K + 1)``.
    Cross terms are left-point sums on the grid, so the algebraic identity
    ``prod_i z(theta_i, T) = z(sum_i theta_i, T) * gamma`` holds exactly on it.
    """
    if int(order) != order or order < 2:
        raise ValueError("order must be an integer >= 2")
    order = int(order)
    Q_path = np.asarray(Q_path, dtype=float)
    if times is None:
        K = Q_path.shape[0] if Q_path.ndim == 3 else 1
        times = np.linspace(0.0, T, K + 1)
    times = np.asarray(times, dtype=float)
    if abs(times[-1] - T) > 1e-9 * max(1.0, T):
        raise ValueError("grid does not end at T")
    Qk, S = _integrated_precision(Q_path, times)

    if isinstance(prior, GaussianPrior):
        return _tilted_gaussian(prior, S, order, times)
    if not isinstance(prior, DiscretePrior):
        raise TypeError("tilted priors exist for discrete and static Gaussian priors only")

    d = prior.n_atoms
    if d ** order > MAX_TUPLES:
        raise ValueError(f"{d}^{order} tuples exceed the enumeration limit {MAX_TUPLES}")
    n = Qk.shape[-1]
    paths = prior.drift_paths(times, n)
    dts = np.diff(times)
    left = paths[:, :-1]
    cross = np.einsum("aki,kij,bkj,k->ab", left, Qk, left, dts)
    idx = np.indices((d,) * order).reshape(order, -1).T
    log_gamma = np.zeros(idx.shape[0])
    for i in range(order):
        for j in range(i + 1, order):
            log_gamma += cross[idx[:, i], idx[:, j]]
    log_mass = np.log(prior.probs)[idx].sum(axis=1) + log_gamma
    logG = logsumexp(log_mass)
    sums = paths[idx].sum(axis=1)
    keys = np.round(sums.reshape(sums.shape[0], -1), 12)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    w = np.zeros(uniq.shape[0])
    np.add.at(w, inverse, np.exp(log_mass - logG))
    first = np.zeros(uniq.shape[0], dtype=np.int64)
    first[inverse[::-1]] = np.arange(inverse.size)[::-1]
    support = sums[first]
    return TiltedPrior(order=order, G=float(np.exp(logG)), times=times, support=support,
                       weights=w / w.sum())


def _tilted_gaussian(prior: GaussianPrior, S, order, times) -> TiltedPrior:
    n = prior.mean.size
    try:
        cinv = np.linalg.inv(prior.cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Gaussian prior covariance must be invertible") from exc
    P = np.kron(np.eye(order), cinv) - np.kron(np.ones((order, order)) - np.eye(order), S)
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(P)[0] <= 1e-12:
        raise ValueError("G infinite: prior variance too large for this Q·T")
    h = np.tile(cinv @ prior.mean, order)
    Pinv_h = np.linalg.solve(P, h)
    _, logdet_c = np.linalg.slogdet(cinv)
    _, logdet_p = np.linalg.slogdet(P)
    logG = 0.5 * (order * logdet_c - logdet_p) + 0.5 * h @ Pinv_h \
        - 0.5 * order * prior.mean @ cinv @ prior.mean
    E = np.tile(np.eye(n), (order, 1))
    cov = E.T @ np.linalg.solve(P, E)
    return TiltedPrior(order=order, G=float(np.exp(logG)), times=times,
                       mean=E.T @ Pinv_h, cov=0.5 * (cov + cov.T))


class PowerEquivalenceFilter(_GridFilter):
    """Drift proxy that makes the myopic power-utility rule optimal.

    It is ``1/order`` times the posterior mean of the summed parameter under
    the tilted prior. Requires deterministic volatility.
    """

    def __init__(self, market: MarketSpec, order: int = 2, prior=None):
        self.market = market
        self.order = order
        self.prior = prior

    def _fit_grid(self, r, times):
        if not self.market.deterministic_vol:
            raise ValueError("the power equivalence filter requires deterministic volatility")
        self.precision_ = precision_path(self.market, r[:1], times)
        self.tilted_ = build_tilted_prior(_resolve_prior(self.market, self.prior), self.precision_,
                                          self.market.horizon, self.order, times)

    def trace(self, X) -> FilterTrace:
        r = self._checked(X)
        tp, dt = self.tilted_, self.dt_
        dR = np.diff(r, axis=1)
        if not tp.gaussian:
            w, post, log_zbar = _mixture_trace(tp.support, np.log(tp.weights), self.precision_, dR, dt)
            return FilterTrace(self.times_, post / tp.order, "power",
                               {"weight": w, "log_zbar_tilted": log_zbar})
        N, K = dR.shape[:2]
        n = self.market.n_stocks
        Y = np.zeros((N, K + 1, n))
        np.cumsum(np.einsum("kij,nkj->nki", self.precision_, dR), axis=1, out=Y[:, 1:])
        S = np.zeros((K + 1, n, n))
        np.cumsum(self.precision_ * dt, axis=0, out=S[1:])
        post = np.empty((N, K + 1, n))
        log_zbar = np.empty((N, K + 1))
        for k in range(K + 1):
            A = np.eye(n) + tp.cov @ S[k]
            gain = np.linalg.solve(A, tp.cov)
            post[:, k] = tp.mean + (Y[:, k] - S[k] @ tp.mean) @ gain.T
            log_zbar[:, k] = gaussian_log_zbar(tp.mean, tp.cov, Y[:, k], S[k])
        return FilterTrace(self.times_, post / tp.order, "power", {"log_zbar_tilted": log_zbar})


# ---------------------------------------------------------------- competitors


class ConstantDriftFilter(_GridFilter):
    """Ignores the data: returns ``value`` or, by default, the prior mean at ``t = 0``."""

    def __init__(self, market: MarketSpec, value=None):
        self.market = market
        self.value = value

    def _fit_grid(self, r, times):
        n = self.market.n_stocks
        if self.value is not None:
            self.value_ = np.broadcast_to(np.asarray(self.value, dtype=float), (n,)).copy()
            return
        prior = self.market.prior
        if isinstance(prior, DiscretePrior):
            self.value_ = prior.mean(0.0, n)
        elif isinstance(prior, GaussianPrior):
            self.value_ = prior.mean
        elif isinstance(prior, OUPrior):
            self.value_ = prior.mean0
        else:
            vals = prior.drift_values(0.0, np.zeros((1, n)))[0]
            self.value_ = prior.initial_probs @ vals

    def trace(self, X) -> FilterTrace:
        r = self._checked(X)
        ahat = np.broadcast_to(self.value_, r.shape).copy()
        return FilterTrace(self.times_, ahat, "constant")


class LaggedFilter(_GridFilter):
    """Delays another filter's output by ``lag`` grid steps (still adapted, just stale)."""

    def __init__(self, market: MarketSpec, base=None, lag: int = 1):
        self.market = market
        self.base = base
        self.lag = lag

    def _fit_grid(self, r, times):
        base = MixtureFilter(self.market) if self.base is None else self.base
        self.base_ = base.fit(r)

    def trace(self, X) -> FilterTrace:
        r = self._checked(X)
        a = self.base_.transform(r)
        lagged = np.concatenate([np.repeat(a[:, :1], self.lag, axis=1), a[:, : a.shape[1] - self.lag]],
                                axis=1)
        return FilterTrace(self.times_, lagged, "lagged")


# ---------------------------------------------------------------- mixture density


def log_mixture_density(market: MarketSpec, X, prior=None, terminal_only: bool = False) -> np.ndarray:
    """``log Zbar(t_k)`` along observed paths; shape ``(N, K + 1)``, or ``(N,)`` at ``T`` only.

    Exact for discrete and static Gaussian priors. For OU and chain priors
    the exponential form driven by the matching filter is used.
    """
    prior = _resolve_prior(market, prior)
    r, times = check_paths(X, market.horizon, market.n_stocks)
    dt = float(times[1] - times[0])
    dR = np.diff(r, axis=1)
    Q = precision_path(market, r, times)
    if isinstance(prior, DiscretePrior):
        paths = prior.drift_paths(times[:-1], market.n_stocks)
        if terminal_only:
            log_z = log_z_increments(paths, Q, dR, dt).sum(axis=1)
            return mixture_log_density(np.log(prior.probs), log_z)
        return mixture_log_density(np.log(prior.probs), accumulate_log_z(paths, Q, dR, dt))
    if isinstance(prior, GaussianPrior) and Q.ndim == 3:
        N, K, n = dR.shape
        Y = np.zeros((N, K + 1, n))
        np.cumsum(np.einsum("kij,nkj->nki", Q, dR), axis=1, out=Y[:, 1:])
        S = np.zeros((K + 1, n, n))
        np.cumsum(Q * dt, axis=0, out=S[1:])
        out = np.stack([gaussian_log_zbar(prior.mean, prior.cov, Y[:, k], S[k]) for k in range(K + 1)], axis=1)
    else:
        filt = WonhamFilter(market, prior) if isinstance(prior, MarkovChainPrior) else KalmanBucyFilter(market, prior)
        out = np.log(zbar_exponential(filt.fit(r).transform(r), Q, dR, dt))
    return out[:, -1] if terminal_only else out
