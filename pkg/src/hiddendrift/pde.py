"""Markov embeddings of the mixture density, the backward pricing equation and replication.

An embedding is a diffusion ``dy = f(y, t) dt + b(y, t) dR`` driven by the
observed excess returns with ``Zbar(T) = phi(y(T))``. Its value function
``V(y, t) = E*[C(y(T)) | y(t) = y]`` solves

    V_t + f . grad V + 0.5 tr(V_yy a) = 0,   a = b Sigma b^T,  V(., T) = C,

with ``Sigma = sigma sigma^T``. The replicating position is ``B b^T grad V``.
Two solvers are provided: Feynman-Kac Monte Carlo (any dimension) and a
Douglas ADI finite-difference scheme (dimension at most 3).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from .filters import SimplexState, riccati_integrate, wonham_step
from .market import MarketSpec
from .priors import DiscretePrior, GaussianPrior, MarkovChainPrior, OUPrior
from .strategies import WealthTrace, run_strategy

MAX_FD_DIM = 3
GRID_VERSION = 1


@dataclass(frozen=True)
class MarkovEmbedding:
    """Coefficients of ``dy = f dt + b dR`` and the terminal map ``phi``.

    ``drift(y, t)`` maps ``(P, M)`` to ``(P, M)``; ``loading(y, t)`` maps
    ``(P, M)`` to ``(P, M, n)``; ``terminal(y)`` maps ``(..., M)`` to ``(...)``.
    ``step(y, t, dR, dt)``, when given, replaces the Euler update in
    :func:`simulate_embedding` (used where an exact grid update exists).
    """

    dim: int
    n_stocks: int
    drift: Callable
    loading: Callable
    terminal: Callable
    y0: np.ndarray
    sigma: Callable
    horizon: float
    label: str = "custom"
    step: Callable | None = None
    time_dependent: bool = True
    lower_bounds: np.ndarray | None = None

    def diffusion(self, y, t) -> np.ndarray:
        """``bbar = b sigma``; shape ``(P, M, n)``."""
        return self.loading(y, t) @ self.sigma(t)

    def covariance(self, y, t) -> np.ndarray:
        bb = self.diffusion(y, t)
        return bb @ np.swapaxes(bb, -1, -2)

    def growth_ratio(self, y, t) -> float:
        """``max (|bbar| + |f|) / (|y| + 1)`` over the given points (linear-growth diagnostic)."""
        y = np.atleast_2d(y)
        num = np.linalg.norm(self.diffusion(y, t), axis=(1, 2)) + np.linalg.norm(self.drift(y, t), axis=1)
        return float(np.max(num / (np.linalg.norm(y, axis=1) + 1.0)))

    def advance(self, y, t, dR, dt):
        if self.step is not None:
            return self.step(y, t, dR, dt)
        return y + self.drift(y, t) * dt + np.einsum("pmi,pi->pm", self.loading(y, t), dR)


def _sigma_fn(spec: MarketSpec):
    if not spec.deterministic_vol:
        raise ValueError("Markov embeddings need deterministic volatility")
    return lambda t: spec.sigma(t)


def _precision_fn(spec):
    sig = _sigma_fn(spec)
    return lambda t: np.linalg.inv(sig(t) @ sig(t).T)


def _finite_paths(spec: MarketSpec, log_coordinates: bool = False) -> MarkovEmbedding:
    prior = spec.prior
    if not isinstance(prior, DiscretePrior):
        raise TypeError("the finite-paths embedding needs a DiscretePrior")
    n, d = spec.n_stocks, prior.n_atoms
    Qf = _precision_fn(spec)
    probs = prior.probs.copy()
    time_dep = prior.time_varying or callable(spec.volatility)

    def atoms(t):
        return prior.drift_paths(np.array([t]), n)[:, 0, :]

    def drift(y, t):
        return np.zeros_like(y)

    def loading(y, t):
        return y[:, :, None] * (atoms(t) @ Qf(t))[None]

    def step(y, t, dR, dt):
        th = atoms(t)
        Qt = Qf(t)
        quad = np.einsum("di,ij,dj->d", th, Qt, th)
        return y * np.exp(dR @ (th @ Qt).T - 0.5 * quad * dt)

    if log_coordinates:
        def drift(y, t):
            th = atoms(t)
            quad = np.einsum("di,ij,dj->d", th, Qf(t), th)
            return np.broadcast_to(-0.5 * quad, y.shape).copy()

        def loading(y, t):
            return np.broadcast_to((atoms(t) @ Qf(t))[None], y.shape + (n,)).copy()

        def step(y, t, dR, dt):
            th = atoms(t)
            Qt = Qf(t)
            return y + dR @ (th @ Qt).T - 0.5 * np.einsum("di,ij,dj->d", th, Qt, th) * dt

        return MarkovEmbedding(dim=d, n_stocks=n, drift=drift, loading=loading,
                               terminal=lambda y: np.exp(y) @ probs, y0=np.zeros(d),
                               sigma=_sigma_fn(spec), horizon=spec.horizon, label="finite_paths_log",
                               step=step, time_dependent=time_dep)
    return MarkovEmbedding(dim=d, n_stocks=n, drift=drift, loading=loading,
                           terminal=lambda y: y @ probs, y0=np.ones(d), sigma=_sigma_fn(spec),
                           horizon=spec.horizon, label="finite_paths", step=step,
                           time_dependent=time_dep, lower_bounds=np.zeros(d))


def _kalman_ou(spec: MarketSpec, riccati_steps: int) -> MarkovEmbedding:
    prior = spec.prior
    if isinstance(prior, GaussianPrior):
        prior = prior.as_ou()
    if not isinstance(prior, OUPrior):
        raise TypeError("the Kalman embedding needs a GaussianPrior or OUPrior")
    n = spec.n_stocks
    Qf = _precision_fn(spec)
    grid = np.linspace(0.0, spec.horizon, riccati_steps + 1)
    gam = riccati_integrate(prior.cov0, grid, Qf, prior.alpha_fn, prior.beta_fn)

    def gamma(t):
        pos = np.clip(t / spec.horizon * riccati_steps, 0, riccati_steps)
        k = min(int(pos), riccati_steps - 1)
        w = pos - k
        return (1 - w) * gam[k] + w * gam[k + 1]

    def drift(y, t):
        m = y[:, :n]
        Qt = Qf(t)
        out = np.zeros_like(y)
        out[:, :n] = (prior.delta_fn(t) - m) @ prior.alpha_fn(t).T - m @ (gamma(t) @ Qt).T
        out[:, n + 1] = -0.5 * np.einsum("pi,ij,pj->p", m, Qt, m) * y[:, n + 1]
        return out

    def loading(y, t):
        m = y[:, :n]
        Qt = Qf(t)
        out = np.zeros((y.shape[0], n + 2, n))
        out[:, :n] = prior.b_fn(t) + gamma(t) @ Qt
        out[:, n] = m @ Qt
        return out

    def step(y, t, dR, dt):
        m = y[:, :n]
        Qt = Qf(t)
        out = np.empty_like(y)
        out[:, :n] = (m + (prior.delta_fn(t) - m) @ prior.alpha_fn(t).T * dt + dR @ prior.b_fn(t).T
                      + (dR - m * dt) @ (gamma(t) @ Qt).T)
        out[:, n] = y[:, n] + np.einsum("pi,ij,pj->p", m, Qt, dR)
        out[:, n + 1] = y[:, n + 1] * np.exp(-0.5 * np.einsum("pi,ij,pj->p", m, Qt, m) * dt)
        return out

    y0 = np.concatenate([prior.mean0, [0.0, 1.0]])
    lower = np.full(n + 2, -np.inf)
    lower[n + 1] = 0.0
    emb = MarkovEmbedding(dim=n + 2, n_stocks=n, drift=drift, loading=loading,
                          terminal=lambda y: y[..., n + 1] * np.exp(y[..., n]), y0=y0,
                          sigma=_sigma_fn(spec), horizon=spec.horizon, label="kalman_ou", step=step,
                          lower_bounds=lower)
    object.__setattr__(emb, "riccati_path", (grid, gam))
    return emb


def _markov_chain(spec: MarketSpec) -> MarkovEmbedding:
    chain = spec.prior
    if not isinstance(chain, MarkovChainPrior):
        raise TypeError("the chain embedding needs a MarkovChainPrior")
    n, d = spec.n_stocks, chain.n_states
    Qf = _precision_fn(spec)
    M = d + n + 1

    def parts(y, t):
        p = np.clip(y[:, :d], 0.0, 1.0)
        vals = chain.drift_values(t, y[:, d:d + n])
        ahat = np.einsum("pd,pdi->pi", p, vals)
        return p, vals, ahat

    def drift(y, t):
        p, vals, ahat = parts(y, t)
        Qt = Qf(t)
        out = np.zeros_like(y)
        dev = vals - ahat[:, None, :]
        out[:, :d] = p @ chain.generator_at(t) - p * np.einsum("pdi,ij,pj->pd", dev, Qt, ahat)
        return out

    def loading(y, t):
        p, vals, ahat = parts(y, t)
        Qt = Qf(t)
        out = np.zeros((y.shape[0], M, n))
        out[:, :d] = p[:, :, None] * ((vals - ahat[:, None, :]) @ Qt)
        out[:, d:d + n] = np.eye(n)
        out[:, M - 1] = y[:, M - 1, None] * (ahat @ Qt)
        return out

    def step(y, t, dR, dt):
        p, vals, ahat = parts(y, t)
        Qt = Qf(t)
        out = np.empty_like(y)
        out[:, :d] = wonham_step(SimplexState(y[:, :d], None, t), chain, y[:, d:d + n], dR, Qt, dt).probs
        out[:, d:d + n] = y[:, d:d + n] + dR
        out[:, M - 1] = y[:, M - 1] * np.exp(np.einsum("pi,ij,pj->p", ahat, Qt, dR)
                                             - 0.5 * np.einsum("pi,ij,pj->p", ahat, Qt, ahat) * dt)
        return out

    y0 = np.concatenate([chain.initial_probs, np.zeros(n), [1.0]])
    lower = np.full(M, -np.inf)
    lower[:d] = 0.0
    lower[M - 1] = 0.0
    return MarkovEmbedding(dim=M, n_stocks=n, drift=drift, loading=loading,
                           terminal=lambda y: y[..., M - 1], y0=y0, sigma=_sigma_fn(spec),
                           horizon=spec.horizon, label="markov_chain", step=step, lower_bounds=lower)


EMBEDDINGS = ("finite_paths", "kalman_ou", "markov_chain")


def build_embedding(spec: MarketSpec, variant: str, riccati_steps: int = 4096,
                    log_coordinates: bool = False) -> MarkovEmbedding:
    """Embedding for ``variant`` in ``finite_paths``, ``kalman_ou`` or ``markov_chain``.

    ``log_coordinates`` (finite paths only) uses ``log z(theta_i, t)`` as the
    state. The coefficients are then constant and the far field of a
    finite-difference box sits in the thin Gaussian tails instead of the
    heavy lognormal ones.
    """
    if variant == "finite_paths":
        return _finite_paths(spec, log_coordinates)
    if variant == "kalman_ou":
        return _kalman_ou(spec, riccati_steps)
    if variant == "markov_chain":
        return _markov_chain(spec)
    raise ValueError(f"unknown embedding {variant!r}; expected one of {EMBEDDINGS}")


def simulate_embedding(emb: MarkovEmbedding, dR: np.ndarray, times: np.ndarray, y0=None) -> np.ndarray:
    """Run the embedding along observed increments ``dR`` (``(N, K, n)``); returns ``(N, K + 1, M)``."""
    N, K, _ = dR.shape
    y = np.empty((N, K + 1, emb.dim))
    y[:, 0] = emb.y0 if y0 is None else y0
    for k in range(K):
        y[:, k + 1] = emb.advance(y[:, k], times[k], dR[:, k], times[k + 1] - times[k])
    return y


# ---------------------------------------------------------------- Feynman-Kac


@dataclass(frozen=True)
class FKResult:
    value: float
    se: float
    gradient: np.ndarray | None = None
    gradient_se: np.ndarray | None = None


def feynman_kac_value(emb: MarkovEmbedding, claim: Callable, y, t: float, n_inner: int, seed: int,
                      dt: float = 2.0 ** -10, gradient: bool = False, bump=None) -> FKResult:
    """Monte-Carlo value ``E*[claim(y(T)) | y(t) = y]`` with standard error.

    Paths use driftless returns ``dR = sigma dw``. With ``gradient=True``
    the same draws are reused at ``y +- h e_j`` (common random numbers),
    ``h = 1e-3 (1 + |y_j|)`` unless ``bump`` is given.
    """
    y = np.asarray(y, dtype=float).reshape(emb.dim)
    M, n = emb.dim, emb.n_stocks
    remaining = emb.horizon - t
    n_steps = max(int(round(remaining / dt)), 0)
    starts = [y]
    if gradient:
        h = 1e-3 * (1.0 + np.abs(y)) if bump is None else np.broadcast_to(np.asarray(bump, float), (M,))
        for j in range(M):
            e = np.zeros(M)
            e[j] = h[j]
            starts += [y + e, y - e]
    S = len(starts)
    state = np.repeat(np.stack(starts), n_inner, axis=0)
    rng = np.random.default_rng([int(seed), 7])
    step = remaining / n_steps if n_steps else 0.0
    for k in range(n_steps):
        s = t + k * step
        dw = rng.standard_normal((n_inner, n)) * np.sqrt(step)
        dR = dw @ emb.sigma(s).T
        state = emb.advance(state, s, np.tile(dR, (S, 1)), step)
    vals = np.asarray(claim(state), dtype=float).reshape(S, n_inner)
    value, se = float(vals[0].mean()), float(vals[0].std(ddof=1) / np.sqrt(n_inner))
    if not gradient:
        return FKResult(value, se)
    diffs = np.stack([(vals[1 + 2 * j] - vals[2 + 2 * j]) / (2 * h[j]) for j in range(M)])
    return FKResult(value, se, diffs.mean(axis=1), diffs.std(axis=1, ddof=1) / np.sqrt(n_inner))


# ---------------------------------------------------------------- finite differences


@dataclass(frozen=True)
class FDGrid:
    """Rectangular grid, time steps and scheme parameters for :func:`solve_cauchy_fd`.

    ``theta`` weights the implicit directional solves (Douglas scheme);
    the first ``rannacher_steps`` steps are fully implicit to damp
    non-smooth terminal data. Only every ``store_every``-th slice is kept.
    """

    lower: tuple
    upper: tuple
    n_points: tuple
    n_steps: int
    theta: float = 0.5
    rannacher_steps: int = 4
    store_every: int = 1
    max_growth: float = 1e6

    def __post_init__(self):
        if not (len(self.lower) == len(self.upper) == len(self.n_points)):
            raise ValueError("lower, upper and n_points must have one entry per dimension")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("grid upper bounds must exceed lower bounds")
        if any(p < 3 for p in self.n_points):
            raise ValueError("need at least 3 grid points per dimension")
        if self.n_steps < 1 or self.store_every < 1:
            raise ValueError("n_steps and store_every must be positive")

    @property
    def axes(self) -> tuple:
        return tuple(np.linspace(lo, hi, p) for lo, hi, p in zip(self.lower, self.upper, self.n_points))


def default_fd_grid(emb: MarkovEmbedding, n_points, n_steps: int, n_sd: float = 6.0,
                    n_samples: int = 4000, seed: int = 0, dt: float = 2.0 ** -8, **kwargs) -> FDGrid:
    """Box of ``n_sd`` standard deviations of ``y*(T)`` around its mean, cut at natural lower bounds."""
    rng = np.random.default_rng([int(seed), 11])
    K = max(int(round(emb.horizon / dt)), 1)
    h = emb.horizon / K
    y = np.repeat(emb.y0[None], n_samples, axis=0)
    for k in range(K):
        dR = (rng.standard_normal((n_samples, emb.n_stocks)) * np.sqrt(h)) @ emb.sigma(k * h).T
        y = emb.advance(y, k * h, dR, h)
    mean, sd = y.mean(axis=0), y.std(axis=0)
    half = np.maximum(n_sd * sd, 0.25 * (1.0 + np.abs(mean)))
    lo, hi = mean - half, mean + half
    if emb.lower_bounds is not None:
        lo = np.maximum(lo, emb.lower_bounds)
    pts = np.broadcast_to(np.asarray(n_points), (emb.dim,))
    return FDGrid(tuple(lo), tuple(hi), tuple(int(p) for p in pts), n_steps, **kwargs)


def _coefficients(emb, pts, shape, t):
    f = emb.drift(pts, t).T.reshape((emb.dim,) + shape)
    a = emb.covariance(pts, t)
    a = np.moveaxis(a, 0, -1).reshape((emb.dim, emb.dim) + shape)
    return f, a


def _directional_bands(f_d, a_dd, h, axis):
    """Tridiagonal coefficients of ``f d/dy + 0.5 a d2/dy2`` along ``axis``.

    Interior: central differences. End points: no second derivative and a
    one-sided first difference pointing into the domain.
    """
    half = 0.5 * a_dd / h ** 2
    lo = half - f_d / (2 * h)
    di = -2 * half
    up = half + f_d / (2 * h)
    lo, di, up = (np.moveaxis(x, axis, -1).copy() for x in (lo, di, up))
    fe = np.moveaxis(f_d, axis, -1)
    lo[..., 0], di[..., 0], up[..., 0] = 0.0, -fe[..., 0] / h, fe[..., 0] / h
    lo[..., -1], di[..., -1], up[..., -1] = -fe[..., -1] / h, fe[..., -1] / h, 0.0
    return lo, di, up


def _apply_bands(bands, V, axis):
    lo, di, up = bands
    v = np.moveaxis(V, axis, -1)
    out = di * v
    out[..., 1:] += lo[..., 1:] * v[..., :-1]
    out[..., :-1] += up[..., :-1] * v[..., 1:]
    return np.moveaxis(out, -1, axis)


def _solve_bands(bands, rhs, axis, weight):
    """Solve ``(I - weight L_d) Y = rhs`` for every grid line along ``axis``."""
    lo, di, up = bands
    r = np.moveaxis(rhs, axis, -1)
    shape = r.shape

    ab = np.zeros((3, r.size))
    upper = -weight * up
    lower = -weight * lo
    upper[..., -1] = 0.0
    lower[..., 0] = 0.0
    ab[0, 1:] = upper.reshape(-1)[:-1]
    ab[1] = (1.0 - weight * di).reshape(-1)
    ab[2, :-1] = lower.reshape(-1)[1:]
    sol = solve_banded((1, 1), ab, r.reshape(-1), check_finite=False).reshape(shape)
    return np.moveaxis(sol, -1, axis)


def _cross_term(V, a_de, hd, he, d, e):
    out = np.zeros_like(V)
    inner = [slice(1, -1)] * V.ndim

    def sl(sd, se):
        idx = list(inner)
        idx[d] = slice(1 + sd, V.shape[d] - 1 + sd)
        idx[e] = slice(1 + se, V.shape[e] - 1 + se)
        return V[tuple(idx)]

    mixed = (sl(1, 1) - sl(1, -1) - sl(-1, 1) + sl(-1, -1)) / (4 * hd * he)
    out[tuple(inner)] = a_de[tuple(inner)] * mixed
    return out


@dataclass(frozen=True)
class ValueFunction:
    """Stored time slices of ``V`` on a rectangular grid, with linear interpolation.

    ``values`` has shape ``(n_slices, N_1, ..., N_M)`` with ``times`` ascending.
    """

    axes: tuple
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_interp", RegularGridInterpolator(
            (self.times,) + tuple(self.axes), self.values, method="linear", bounds_error=True))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    def _points(self, y, t):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        lo = np.array([ax[0] for ax in self.axes])
        hi = np.array([ax[-1] for ax in self.axes])
        tol = 1e-12 * (1 + np.abs(hi - lo))
        if np.any(y < lo - tol) or np.any(y > hi + tol):
            raise ValueError("y outside the finite-difference domain")
        t = np.broadcast_to(np.asarray(t, dtype=float), (y.shape[0],))
        return np.column_stack([np.clip(t, self.times[0], self.times[-1]), np.clip(y, lo, hi)])

    def __call__(self, y, t) -> np.ndarray:
        return self._interp(self._points(y, t))

    def gradient(self, y, t) -> np.ndarray:
        """Central differences of the interpolant with the grid spacing (one-sided at the edges)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        self._points(y, t)
        lo = np.array([ax[0] for ax in self.axes])
        hi = np.array([ax[-1] for ax in self.axes])
        h = self.spacing
        out = np.empty_like(y)
        for j in range(self.dim):
            up = y.copy()
            dn = y.copy()
            up[:, j] = np.minimum(y[:, j] + h[j], hi[j])
            dn[:, j] = np.maximum(y[:, j] - h[j], lo[j])
            out[:, j] = (self(up, t) - self(dn, t)) / (up[:, j] - dn[:, j])
        return out

    def save(self, stem) -> tuple[Path, Path]:
        """Binary ``.npy`` array plus ``.json`` metadata (bounds, spacing, times)."""
        stem = Path(stem)
        npy, meta_path = stem.with_suffix(".npy"), stem.with_suffix(".json")
        np.save(npy, self.values)
        meta = {"format_version": GRID_VERSION, "shape": list(self.values.shape),
                "lower": [float(ax[0]) for ax in self.axes], "upper": [float(ax[-1]) for ax in self.axes],
                "n_points": [int(ax.size) for ax in self.axes], "spacing": self.spacing.tolist(),
                "times": self.times.tolist(), "meta": self.meta}
        meta_path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
        return npy, meta_path

    @classmethod
    def load(cls, stem) -> "ValueFunction":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
        if meta.get("format_version") != GRID_VERSION:
            raise ValueError(f"unsupported grid format version {meta.get('format_version')}")
        axes = tuple(np.linspace(lo, hi, p) for lo, hi, p in zip(meta["lower"], meta["upper"], meta["n_points"]))
        return cls(axes=axes, times=np.asarray(meta["times"]), values=np.load(stem.with_suffix(".npy")),
                   meta=meta.get("meta", {}))


def solve_cauchy_fd(emb: MarkovEmbedding, claim: Callable, grid: FDGrid, t0: float = 0.0) -> ValueFunction:
    """Backward Douglas ADI solve of the pricing equation from ``T`` to ``t0``.

    Diagonal second-order and drift terms are implicit along each
    dimension; mixed derivatives are explicit.
    """
    M = emb.dim
    if M > MAX_FD_DIM:
        raise ValueError(f"finite differences support dimension <= {MAX_FD_DIM}; use Feynman-Kac")
    if len(grid.n_points) != M:
        raise ValueError("grid dimension does not match the embedding")
    axes = grid.axes
    h = np.array([ax[1] - ax[0] for ax in axes])
    mesh = np.meshgrid(*axes, indexing="ij")
    shape = mesh[0].shape
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    V = np.asarray(claim(pts), dtype=float).reshape(shape)
    scale = max(np.abs(V).max(), 1.0)
    T = emb.horizon
    dtau = (T - t0) / grid.n_steps
    store_t, store_v = [T], [V.copy()]
    coeff = None
    explicit_theta = grid.theta < 0.5

    for step in range(grid.n_steps):
        t_new = T - (step + 1) * dtau
        if coeff is None or emb.time_dependent:
            f, a = _coefficients(emb, pts, shape, t_new + 0.5 * dtau)
            bands = [_directional_bands(f[d], a[d, d], h[d], d) for d in range(M)]
            pairs = [(d, e) for d in range(M) for e in range(d + 1, M) if np.any(a[d, e] != 0)]
            coeff = (bands, pairs, a)
            if explicit_theta:
                rate = sum(np.abs(a[d, d]) / h[d] ** 2 + np.abs(f[d]) / h[d] for d in range(M))
                rate = rate + sum(np.abs(a[d, e]) / (h[d] * h[e]) for d, e in pairs)
                if dtau * rate.max() > 1.0:
                    need = int(np.ceil((T - t0) * rate.max()))
                    raise ValueError(f"explicit stability limit violated; use n_steps >= {need}")
        bands, pairs, a = coeff
        theta = 1.0 if step < grid.rannacher_steps else grid.theta
        LV = [_apply_bands(b, V, d) for d, b in enumerate(bands)]
        Y = V + dtau * sum(LV)
        for d, e in pairs:
            Y = Y + dtau * _cross_term(V, a[d, e], h[d], h[e], d, e)
        for d in range(M):
            Y = _solve_bands(bands[d], Y - theta * dtau * LV[d], d, theta * dtau)
        V = Y
        if not np.all(np.isfinite(V)) or np.abs(V).max() > grid.max_growth * scale:
            raise FloatingPointError(
                f"finite-difference solution unstable at t={t_new:.6g}; increase n_steps "
                f"(currently {grid.n_steps})")
        if (step + 1) % grid.store_every == 0 or step + 1 == grid.n_steps:
            store_t.append(t_new)
            store_v.append(V.copy())

    times = np.array(store_t[::-1])
    values = np.stack(store_v[::-1])
    return ValueFunction(axes=axes, times=times, values=values,
                         meta={"embedding": emb.label, "n_steps": grid.n_steps, "theta": grid.theta})


# ---------------------------------------------------------------- replication


def extract_strategy(emb: MarkovEmbedding, value: ValueFunction, y, t: float, bank) -> np.ndarray:
    """Replicating positions ``B b(y, t)^T grad V(y, t)``; shape ``(P, n)``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    grad = value.gradient(y, t)
    return np.asarray(bank, dtype=float)[..., None] * np.einsum("pmi,pm->pi", emb.loading(y, t), grad)


def replicate(emb: MarkovEmbedding, value: ValueFunction, dR: np.ndarray, times: np.ndarray,
              bank: np.ndarray, initial_wealth: float, target=None, y0=None) -> WealthTrace:
    """Trade the PDE strategy along observed increments and record the wealth."""
    y = simulate_embedding(emb, dR, times, y0)

    def rule(k, wealth, B):
        return extract_strategy(emb, value, y[:, k], times[k], B)

    trace = run_strategy(rule, dR, bank, times, initial_wealth, target=target)
    trace.meta["embedding_state"] = y
    trace.meta["model_value"] = value(y[:, 0], times[0])
    return trace
