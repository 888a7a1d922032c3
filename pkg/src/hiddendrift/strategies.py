"""Utilities, the budget multiplier, optimal claims and self-financing wealth.

Portfolios are scikit-learn style estimators: ``fit`` fits the drift filter
and the budget multiplier, ``predict`` returns the positions along each path,
``wealth_trace`` the full self-financing wealth record and ``score`` the mean
terminal utility.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from ._validation import check_paths
from .filters import (KalmanBucyFilter, MixtureFilter, PowerEquivalenceFilter,
                      WonhamFilter, log_mixture_density)
from .market import MarketSpec, PathBundle, precision_path, rate_integral
from .priors import DiscretePrior, GaussianPrior, MarkovChainPrior, OUPrior


# ---------------------------------------------------------------- utilities


@dataclass(frozen=True)
class LogUtility:
    """``U(x) = log(x + delta)`` with optimal claim map ``F(z, lam) = z / lam - delta``."""

    delta: float = 0.0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")

    @property
    def domain(self) -> tuple[float, float]:
        return (-self.delta, np.inf)

    def utility(self, x):
        return np.log(np.asarray(x, dtype=float) + self.delta)

    def claim_map(self, z, lam):
        return np.asarray(z, dtype=float) / lam - self.delta


@dataclass(frozen=True)
class PowerUtility:
    """``U(x) = x^e / e`` with ``e = (order - 1) / order`` and ``F(z, lam) = (z / lam)^order``."""

    order: int = 2

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 2:
            raise ValueError("order must be an integer >= 2")

    @property
    def exponent(self) -> float:
        return (self.order - 1) / self.order

    @property
    def domain(self) -> tuple[float, float]:
        return (0.0, np.inf)

    def utility(self, x):
        e = self.exponent
        return np.asarray(x, dtype=float) ** e / e

    def claim_map(self, z, lam):
        return (np.asarray(z, dtype=float) / lam) ** self.order


@dataclass(frozen=True)
class GenericUtility:
    """User-supplied utility.

    The claim map maximizes ``z U(x) - lam x`` over the domain. Supply it as
    ``claim``, or supply the marginal utility ``marginal`` (strictly
    decreasing) and it is found by root finding on ``U'(x) = lam / z``.
    """

    utility_fn: Callable
    claim: Callable | None = None
    marginal: Callable | None = None
    lower: float = 0.0
    upper: float = np.inf

    def __post_init__(self):
        if self.claim is None and self.marginal is None:
            raise ValueError("GenericUtility needs a claim map or a marginal utility")

    @property
    def domain(self) -> tuple[float, float]:
        return (self.lower, self.upper)

    def utility(self, x):
        return np.asarray(self.utility_fn(np.asarray(x, dtype=float)), dtype=float)

    def claim_map(self, z, lam):
        if self.claim is not None:
            return np.asarray(self.claim(np.asarray(z, dtype=float), lam), dtype=float)
        z = np.asarray(z, dtype=float)
        return np.vectorize(lambda zz: self._argmax(zz, lam))(z)

    def _argmax(self, z, lam):
        target = lam / z
        lo = self.lower + 1e-12 * (1 + abs(self.lower))
        hi = lo + 1.0
        while self.marginal(hi) > target:
            hi = lo + 2 * (hi - lo)
            if hi > min(self.upper, 1e300):
                raise ValueError("claim map argmax not bracketed")
        if self.marginal(lo) < target:
            return lo
        return brentq(lambda x: self.marginal(x) - target, lo, hi, xtol=1e-14, rtol=1e-14)


Utility = LogUtility | PowerUtility | GenericUtility


def check_claim_map(utility: Utility, lam: float, z, x) -> np.ndarray:
    """Pointwise check that ``F(z, lam)`` maximizes ``z U(x) - lam x``; boolean array."""
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    f = utility.claim_map(z, lam)
    best = z * utility.utility(f) - lam * f
    other = z * utility.utility(x) - lam * x
    return best >= other - 1e-10 * (1 + np.abs(best))


# ---------------------------------------------------------------- multiplier and claim


def solve_lambda(utility: Utility, zbar_samples=None, initial_wealth: float = 1.0,
                 G: float | None = None, tol: float = 1e-12, max_iter: int = 500) -> float:
    """Budget multiplier with ``E* F(Zbar, lam) = X0``.

    Log and power are closed form (power uses ``G`` when given, otherwise the
    sample moment of ``Zbar^order``). Generic utilities bisect on ``log lam``
    over the ``Pstar`` samples.
    """
    X0 = float(initial_wealth)
    if isinstance(utility, LogUtility):
        return 1.0 / (X0 + utility.delta)
    if isinstance(utility, PowerUtility):
        if G is None:
            if zbar_samples is None:
                raise ValueError("power utility needs G or Pstar samples of Zbar")
            G = float(np.mean(np.asarray(zbar_samples, dtype=float) ** utility.order))
        return X0 ** (-1.0 / utility.order) * G ** (1.0 / utility.order)
    if zbar_samples is None:
        raise ValueError("generic utility needs Pstar samples of Zbar")
    z = np.asarray(zbar_samples, dtype=float)

    def excess(log_lam):
        return float(np.mean(utility.claim_map(z, np.exp(log_lam)))) - X0

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if excess(lo) > 0:
            break
        lo -= 2 * abs(lo)
    for _ in range(200):
        if excess(hi) < 0:
            break
        hi += 2 * abs(hi)
    if not (excess(lo) > 0 > excess(hi)):
        raise ValueError("could not bracket the budget multiplier")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return float(np.exp(0.5 * (lo + hi)))


def optimal_claim(utility: Utility, lam: float, zbar_T) -> np.ndarray:
    """``xi = F(Zbar(T), lam)``; raises if a value leaves the utility's domain."""
    xi = utility.claim_map(zbar_T, lam)
    lo, hi = utility.domain
    if np.any(xi < lo) or np.any(xi > hi) or not np.all(np.isfinite(xi)):
        raise ValueError("optimal claim leaves the utility domain")
    return xi


# ---------------------------------------------------------------- strategies and wealth


def wealth_step(wealth, position, bank, dR):
    """Normalized wealth after one step: ``X + B^{-1} pi . dR``."""
    return np.asarray(wealth) + np.einsum("...i,...i->...", position, dR) / bank


def log_strategy(wealth, bank, ahat, Q, delta: float = 0.0):
    """Positions ``(X + delta B) Q ahat`` for log utility."""
    scale = np.asarray(wealth, dtype=float) + delta * np.asarray(bank, dtype=float)
    return scale[..., None] * np.einsum("...ij,...j->...i", Q, ahat)


def power_strategy(wealth, bank, ahat_pow, Q, order: int):
    """Positions ``order X Q ahat_pow`` for power utility, with the equivalence-filter drift."""
    if ahat_pow is None:
        raise ValueError("power strategy needs the equivalence-filter drift (tilted prior)")
    return order * np.asarray(wealth, dtype=float)[..., None] * np.einsum("...ij,...j->...i", Q, ahat_pow)


@dataclass
class WealthTrace:
    """Self-financing wealth along each path.

    ``position`` is ``(N, K, n)`` (held over ``[t_k, t_{k+1})``), ``wealth`` and
    ``normalized`` are ``(N, K + 1)``, ``target`` is the claim to replicate.
    """

    times: np.ndarray
    position: np.ndarray
    wealth: np.ndarray
    normalized: np.ndarray
    initial_wealth: float
    target: np.ndarray | None = None
    floor: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def terminal(self) -> np.ndarray:
        return self.normalized[:, -1]

    @property
    def replication_error(self) -> np.ndarray | None:
        return None if self.target is None else np.abs(self.terminal - self.target)

    @property
    def floor_breaches(self) -> np.ndarray:
        """Paths whose normalized gain ever drops below ``-floor`` (monitored, never clipped)."""
        if self.floor is None:
            return np.zeros(self.normalized.shape[0], dtype=bool)
        return (self.normalized - self.initial_wealth).min(axis=1) < -self.floor

    def summary(self) -> dict:
        out = {"n_paths": int(self.normalized.shape[0]),
               "terminal_mean": float(self.terminal.mean()),
               "floor_breach_fraction": float(self.floor_breaches.mean())}
        err = self.replication_error
        if err is not None:
            q = np.quantile(err, [0.5, 0.9, 0.99, 1.0])
            out["replication_error"] = {"mean": float(err.mean()), "q50": float(q[0]),
                                        "q90": float(q[1]), "q99": float(q[2]), "max": float(q[3])}
        return out

    def to_csv(self, path, path_offset: int = 0) -> None:
        """One row per (path, time); the position at ``T`` is written as ``nan``."""
        N, K1 = self.wealth.shape
        n = self.position.shape[2]
        pos = np.concatenate([self.position, np.full((N, 1, n), np.nan)], axis=1)
        cols = ["path", "t"] + [f"pi_{i + 1}" for i in range(n)] + ["X", "Xtilde"]
        data = np.hstack([np.repeat(np.arange(path_offset, path_offset + N), K1)[:, None],
                          np.tile(self.times, N)[:, None], pos.reshape(N * K1, n),
                          self.wealth.reshape(-1, 1), self.normalized.reshape(-1, 1)])
        fmt = ["%d"] + ["%.17g"] * (data.shape[1] - 1)
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt=fmt,
                   encoding="utf-8")


def run_strategy(rule: Callable, dR: np.ndarray, bank: np.ndarray, times: np.ndarray,
                 initial_wealth: float, target=None, floor=None) -> WealthTrace:
    """Trade ``rule(k, X, B) -> pi`` with left-point positions on every path."""
    N, K, n = dR.shape
    Xn = np.empty((N, K + 1))
    Xn[:, 0] = initial_wealth
    pos = np.empty((N, K, n))
    for k in range(K):
        pos[:, k] = rule(k, bank[:, k] * Xn[:, k], bank[:, k])
        Xn[:, k + 1] = wealth_step(Xn[:, k], pos[:, k], bank[:, k], dR[:, k])
    return WealthTrace(times=times, position=pos, wealth=Xn * bank, normalized=Xn,
                       initial_wealth=initial_wealth, target=target, floor=floor)


# ---------------------------------------------------------------- estimators


def default_filter(market: MarketSpec):
    """Posterior-mean filter matching the market's prior family."""
    prior = market.prior
    if isinstance(prior, DiscretePrior):
        return MixtureFilter(market)
    if isinstance(prior, GaussianPrior | OUPrior):
        return KalmanBucyFilter(market)
    if isinstance(prior, MarkovChainPrior):
        return WonhamFilter(market)
    raise TypeError(f"no default filter for {type(prior).__name__}")


def _bank(market: MarketSpec, X, r, times):
    if isinstance(X, PathBundle):
        return rate_integral(X)
    rates = np.stack([market.rate_at(t, r[:, : k + 1]) for k, t in enumerate(times)], axis=1)
    B = np.zeros_like(rates)
    np.cumsum(rates[:, :-1] * np.diff(times), axis=1, out=B[:, 1:])
    return np.exp(B)


class CertaintyEquivalentPortfolio(BaseEstimator):
    """Myopic rule fed by any drift filter.

    ``utility`` picks the rule: log gives ``scale (X + delta B) Q ahat``, power
    gives ``scale order X Q ahat``. With ``scale=0`` this is the zero
    strategy; with a :class:`ConstantDriftFilter` the frozen-prior rule.
    """

    def __init__(self, market: MarketSpec, filter=None, utility=None, scale: float = 1.0,
                 floor: float | None = None):
        self.market = market
        self.filter = filter
        self.utility = utility
        self.scale = scale
        self.floor = floor

    def _utility(self):
        return LogUtility() if self.utility is None else self.utility

    def _make_filter(self):
        return default_filter(self.market) if self.filter is None else clone(self.filter)

    def fit(self, X, y=None):
        r, times = check_paths(X, self.market.horizon, self.market.n_stocks)
        self.filter_ = self._make_filter().fit(X)
        self.times_ = times
        self.lambda_ = self._fit_lambda()
        return self

    def _fit_lambda(self):
        u = self._utility()
        if isinstance(u, LogUtility):
            return solve_lambda(u, initial_wealth=self.market.initial_wealth)
        return None

    def _target(self, X, r):
        return None

    def wealth_trace(self, X) -> WealthTrace:
        check_is_fitted(self)
        r, times = check_paths(X, self.market.horizon, self.market.n_stocks)
        ahat = self.filter_.transform(X)
        Q = precision_path(self.market, r, times)
        bank = _bank(self.market, X, r, times)
        u = self._utility()
        scale = self.scale

        def rule(k, wealth, B):
            Qk = Q[k] if Q.ndim == 3 else Q[:, k]
            if isinstance(u, PowerUtility):
                return scale * power_strategy(wealth, B, ahat[:, k], Qk, u.order)
            delta = u.delta if isinstance(u, LogUtility) else 0.0
            return scale * log_strategy(wealth, B, ahat[:, k], Qk, delta)

        trace = run_strategy(rule, np.diff(r, axis=1), bank, times, self.market.initial_wealth,
                             target=self._target(X, r), floor=self.floor)
        trace.meta["ahat"] = ahat
        return trace

    def predict(self, X) -> np.ndarray:
        """Positions ``(N, K, n)`` along each path."""
        return self.wealth_trace(X).position

    def score(self, X, y=None) -> float:
        """Mean utility of terminal normalized wealth."""
        return float(np.mean(self._utility().utility(self.wealth_trace(X).terminal)))


class LogUtilityPortfolio(CertaintyEquivalentPortfolio):
    """Optimal log-utility portfolio: the myopic rule with the posterior-mean filter."""

    def __init__(self, market: MarketSpec, delta: float = 0.0, filter=None, floor: float | None = None):
        self.market = market
        self.delta = delta
        self.filter = filter
        self.floor = floor

    scale = 1.0

    def _utility(self):
        return LogUtility(self.delta)

    def _target(self, X, r):
        zbar = np.exp(log_mixture_density(self.market, X, terminal_only=True))
        return optimal_claim(self._utility(), self.lambda_, zbar)


class PowerUtilityPortfolio(CertaintyEquivalentPortfolio):
    """Optimal power-utility portfolio: the myopic rule with the equivalence filter."""

    def __init__(self, market: MarketSpec, order: int = 2, floor: float | None = None):
        self.market = market
        self.order = order
        self.floor = floor

    scale = 1.0

    def _utility(self):
        return PowerUtility(self.order)

    def _make_filter(self):
        return PowerEquivalenceFilter(self.market, order=self.order)

    def _fit_lambda(self):
        self.G_ = self.filter_.tilted_.G
        return solve_lambda(self._utility(), initial_wealth=self.market.initial_wealth, G=self.G_)

    def _target(self, X, r):
        zbar = np.exp(log_mixture_density(self.market, X, terminal_only=True))
        return optimal_claim(self._utility(), self.lambda_, zbar)

    def expected_utility(self) -> float:
        """Closed-form optimum ``X0^e G^(1-e) / e``."""
        check_is_fitted(self)
        e = self._utility().exponent
        return self.market.initial_wealth ** e * self.G_ ** (1 - e) / e


__all__ = ["LogUtility", "PowerUtility", "GenericUtility", "check_claim_map", "solve_lambda",
           "optimal_claim", "wealth_step", "log_strategy", "power_strategy", "WealthTrace",
           "run_strategy", "default_filter", "CertaintyEquivalentPortfolio", "LogUtilityPortfolio",
           "PowerUtilityPortfolio"]
