"""Market model, path simulation under P and P*, and path-level observables."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy.linalg import expm

from .priors import DiscretePrior, GaussianPrior, MarkovChainPrior, OUPrior, Prior

MEASURES = ("P", "Pstar")
CACHE_MAGIC = b"HDPB"
CACHE_VERSION = 1


class EllipticityError(ValueError):
    """Raised when ``sigma sigma^T`` drops below ``c I`` on the simulation grid."""


def _grid_steps(horizon: float, dt: float) -> int:
    n_steps = int(round(horizon / dt))
    if n_steps < 1 or abs(n_steps * dt - horizon) > 1e-12 * max(1.0, horizon):
        raise ValueError(f"dt={dt!r} does not divide the horizon T={horizon!r}")
    return n_steps


@dataclass(frozen=True)
class MarketSpec:
    """Coefficients of the market and the prior for the hidden drift.

    ``volatility`` is a scalar (times the identity), an ``n x n`` matrix, or a
    callable. Callables take ``t`` alone unless ``vol_depends_on_path`` is set,
    in which case they take ``(t, history)`` with ``history`` the excess-return
    levels observed so far, shape ``(n_paths, k + 1, n)``. ``rate`` follows the
    same convention with ``rate_depends_on_path``.
    """

    n_stocks: int
    horizon: float
    prior: Prior
    volatility: object = 0.2
    rate: object = 0.0
    initial_prices: np.ndarray | None = None
    initial_wealth: float = 1.0
    ellipticity: float = 1e-10
    vol_bound: float = 1e3
    rate_bound: float = 10.0
    vol_depends_on_path: bool = False
    rate_depends_on_path: bool = False

    def __post_init__(self):
        if self.n_stocks < 1:
            raise ValueError("n_stocks must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.initial_wealth > 0:
            raise ValueError("initial_wealth must be positive")
        prices = (np.full(self.n_stocks, 100.0) if self.initial_prices is None
                  else np.asarray(self.initial_prices, dtype=float).reshape(self.n_stocks))
        if np.any(prices <= 0):
            raise ValueError("initial prices must be positive")
        object.__setattr__(self, "initial_prices", prices)
        if isinstance(self.prior, OUPrior | GaussianPrior):
            dim = self.prior.n if isinstance(self.prior, OUPrior) else self.prior.mean.size
            if dim != self.n_stocks:
                raise ValueError("prior dimension does not match n_stocks")
        if isinstance(self.prior, MarkovChainPrior) and self.prior.values.shape[1] not in (1, self.n_stocks):
            raise ValueError("chain values must be scalars or n-vectors")

    @property
    def deterministic_vol(self) -> bool:
        return not self.vol_depends_on_path

    def sigma(self, t: float, history: np.ndarray | None = None) -> np.ndarray:
        """Volatility matrix at ``t``; ``(n, n)`` or ``(n_paths, n, n)``."""
        n = self.n_stocks
        vol = self.volatility
        if callable(vol):
            if self.vol_depends_on_path:
                if history is None:
                    raise ValueError("path-dependent volatility needs the observed history")
                out = np.asarray(vol(t, history), dtype=float)
            else:
                out = np.asarray(vol(t), dtype=float)
        else:
            out = np.asarray(vol, dtype=float)
        if out.ndim == 0:
            out = out * np.eye(n)
        elif out.ndim == 1 and self.vol_depends_on_path and n == 1:
            out = out[:, None, None]
        return out

    def check_sigma(self, sig: np.ndarray, k: int) -> None:
        if np.abs(sig).max() > self.vol_bound:
            raise ValueError(f"volatility exceeds vol_bound at step {k}")
        gram = sig @ np.swapaxes(sig, -1, -2)
        lam = np.linalg.eigvalsh(gram)[..., 0]
        bad = np.flatnonzero(np.atleast_1d(lam) < self.ellipticity)
        if bad.size:
            raise EllipticityError(
                f"sigma sigma^T below c*I (c={self.ellipticity:g}) at step {k}, "
                f"path {int(bad[0])}: smallest eigenvalue {np.atleast_1d(lam)[bad[0]]:.3e}")

    def rate_at(self, t: float, history: np.ndarray) -> np.ndarray:
        n_paths = history.shape[0]
        rate = self.rate
        if callable(rate):
            out = rate(t, history) if self.rate_depends_on_path else rate(t)
        else:
            out = rate
        out = np.broadcast_to(np.asarray(out, dtype=float), (n_paths,))
        if np.abs(out).max() > self.rate_bound:
            raise ValueError(f"interest rate exceeds rate_bound at t={t:g}")
        return out

    def precision(self, t: float, history: np.ndarray | None = None) -> np.ndarray:
        """``Q(t) = (sigma sigma^T)^{-1}``."""
        sig = self.sigma(t, history)
        return np.linalg.inv(sig @ np.swapaxes(sig, -1, -2))


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Discretized sample paths on the uniform grid ``t_k = k dt``.

    Arrays are indexed ``[path, time, component]``. ``drift`` is ``None``
    under ``Pstar``; ``theta`` holds the per-path parameter draw (atom index,
    static Gaussian draw, or chain state path) under ``P``.
    """

    times: np.ndarray
    dt: float
    measure: str
    seed: int
    path_offset: int
    r_tilde: np.ndarray
    rates: np.ndarray
    dw: np.ndarray
    drift: np.ndarray | None = None
    theta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.r_tilde.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def n_stocks(self) -> int:
        return self.r_tilde.shape[2]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.r_tilde, axis=1)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.times, self.r_tilde, self.rates, self.dw, self.drift, self.theta):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{self.measure}|{self.seed}|{self.path_offset}|{self.dt!r}".encode())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        """One row per (path, time)."""
        n = self.n_stocks
        cols = ["path", "t"] + [f"rtilde_{i + 1}" for i in range(n)] + ["r"]
        if self.drift is not None:
            cols += [f"drift_{i + 1}" for i in range(n)]
        N, K1 = self.n_paths, self.times.size
        block = [np.repeat(np.arange(self.path_offset, self.path_offset + N), K1)[:, None],
                 np.tile(self.times, N)[:, None],
                 self.r_tilde.reshape(N * K1, n),
                 self.rates.reshape(N * K1, 1)]
        if self.drift is not None:
            block.append(self.drift.reshape(N * K1, n))
        data = np.hstack(block)
        fmt = ["%d"] + ["%.17g"] * (data.shape[1] - 1)
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt=fmt,
                   encoding="utf-8")

    def save(self, path) -> None:
        """Binary cache: magic bytes, format version, then an ``npz`` payload."""
        header = {"dt": self.dt, "measure": self.measure, "seed": int(self.seed),
                  "path_offset": int(self.path_offset), "meta": self.meta}
        arrays = {"times": self.times, "r_tilde": self.r_tilde, "rates": self.rates, "dw": self.dw}
        if self.drift is not None:
            arrays["drift"] = self.drift
        if self.theta is not None:
            arrays["theta"] = self.theta
        buf = io.BytesIO()
        np.savez(buf, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(np.uint32(CACHE_VERSION).tobytes())
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "PathBundle":
        raw = Path(path).read_bytes()
        if raw[:4] != CACHE_MAGIC:
            raise ValueError("not a path-bundle cache file")
        version = int(np.frombuffer(raw[4:8], dtype=np.uint32)[0])
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        with np.load(io.BytesIO(raw[8:])) as npz:
            header = json.loads(npz["header"].tobytes().decode())
            arrays = {k: npz[k] for k in npz.files if k != "header"}
        return cls(times=arrays["times"], dt=header["dt"], measure=header["measure"],
                   seed=header["seed"], path_offset=header["path_offset"],
                   r_tilde=arrays["r_tilde"], rates=arrays["rates"], dw=arrays["dw"],
                   drift=arrays.get("drift"), theta=arrays.get("theta"), meta=header["meta"])


def _path_rngs(seed: int, start: int, count: int, stream: int):
    return [np.random.default_rng([int(seed), start + i, stream]) for i in range(count)]


def _brownian(seed, start, count, n_steps, n, dt, refine, stream=0):
    fine = n_steps * refine
    out = np.empty((count, n_steps, n))
    scale = np.sqrt(dt / refine)
    for i, rng in enumerate(_path_rngs(seed, start, count, stream)):
        z = rng.standard_normal((fine, n)) * scale
        out[i] = z.reshape(n_steps, refine, n).sum(axis=1)
    return out


def simulate_paths(spec: MarketSpec, dt: float, n_paths: int, seed: int, measure: str = "P",
                   path_offset: int = 0, refine: int = 1) -> PathBundle:
    """Euler-Maruyama paths of the excess returns.

    Every path draws from generators keyed on ``(seed, path_index)``, so a
    bundle is reproducible bit for bit and a chunk of paths equals the
    corresponding slice of a larger run. ``refine > 1`` draws the Brownian
    increments on a grid ``refine`` times finer and sums them, which couples
    runs at different ``dt`` that share the finest grid.
    """
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    n_steps = _grid_steps(spec.horizon, dt)
    n = spec.n_stocks
    times = np.arange(n_steps + 1) * dt
    times[-1] = spec.horizon
    dw = _brownian(seed, path_offset, n_paths, n_steps, n, dt, refine, stream=0)

    R = np.zeros((n_paths, n_steps + 1, n))
    rates = np.empty((n_paths, n_steps + 1))
    drift = theta = None
    step_drift: Callable[[int, np.ndarray], np.ndarray] | None = None
    prior = spec.prior
    if measure == "P":
        drift = np.empty((n_paths, n_steps + 1, n))
        prior_rngs = _path_rngs(seed, path_offset, n_paths, stream=1)
        if isinstance(prior, DiscretePrior):
            cum = np.cumsum(prior.probs)
            u = np.array([g.random() for g in prior_rngs])
            theta = np.minimum(np.searchsorted(cum, u, side="right"), prior.n_atoms - 1)
            atom_paths = prior.drift_paths(times, n)
            drift[:] = atom_paths[theta]
            step_drift = None
        elif isinstance(prior, GaussianPrior):
            evals, evecs = np.linalg.eigh(prior.cov)
            root = evecs * np.sqrt(np.clip(evals, 0.0, None))
            z = np.stack([g.standard_normal(n) for g in prior_rngs])
            theta = prior.mean + z @ root.T
            drift[:] = theta[:, None, :]
        elif isinstance(prior, OUPrior):
            evals, evecs = np.linalg.eigh(prior.cov0)
            root = evecs * np.sqrt(np.clip(evals, 0.0, None))
            a0 = np.empty((n_paths, n))
            dW = np.empty((n_paths, n_steps, n))
            scale = np.sqrt(dt / refine)
            for i, g in enumerate(prior_rngs):
                a0[i] = prior.mean0 + root @ g.standard_normal(n)
                dW[i] = (g.standard_normal((n_steps * refine, n)) * scale).reshape(
                    n_steps, refine, n).sum(axis=1)
            drift[:, 0] = a0
            alpha, beta, bload, delta = prior.alpha_fn, prior.beta_fn, prior.b_fn, prior.delta_fn

            def step_drift(k, dR):
                t = times[k]
                a = drift[:, k]
                return (a + (delta(t) - a) @ alpha(t).T * dt + dR @ bload(t).T
                        + dW[:, k] @ beta(t).T)
        elif isinstance(prior, MarkovChainPrior):
            d = prior.n_states
            cum0 = np.cumsum(prior.initial_probs)
            u0 = np.array([g.random() for g in prior_rngs])
            jumps = np.stack([g.random(n_steps) for g in prior_rngs])
            states = np.empty((n_paths, n_steps + 1), dtype=np.int64)
            states[:, 0] = np.minimum(np.searchsorted(cum0, u0, side="right"), d - 1)
            theta = states
            drift[:, 0] = prior.drift_values(times[0], R[:, 0])[np.arange(n_paths), states[:, 0]]

            def step_drift(k, dR):
                trans = expm(prior.generator_at(times[k]) * dt)
                cum = np.cumsum(trans[states[:, k]], axis=1)
                nxt = (jumps[:, k][:, None] >= cum[:, :-1]).sum(axis=1)
                states[:, k + 1] = nxt
                vals = prior.drift_values(times[k + 1], R[:, k + 1])
                return vals[np.arange(n_paths), nxt]
        else:
            raise TypeError(f"unsupported prior {type(prior).__name__}")

    for k in range(n_steps):
        t = times[k]
        hist = R[:, : k + 1]
        sig = spec.sigma(t, hist)
        spec.check_sigma(sig, k)
        rates[:, k] = spec.rate_at(t, hist)
        noise = np.einsum("...ij,...j->...i", sig, dw[:, k])
        dR = noise if drift is None else drift[:, k] * dt + noise
        R[:, k + 1] = R[:, k] + dR
        if step_drift is not None:
            drift[:, k + 1] = step_drift(k, dR)
    rates[:, -1] = spec.rate_at(times[-1], R)

    return PathBundle(times=times, dt=dt, measure=measure, seed=int(seed), path_offset=path_offset,
                      r_tilde=R, rates=rates, dw=dw, drift=drift, theta=theta,
                      meta={"refine": refine})


def iter_bundles(spec: MarketSpec, dt: float, n_paths: int, seed: int, measure: str = "P",
                 chunk_size: int = 5000, refine: int = 1) -> Iterator[PathBundle]:
    """Simulate ``n_paths`` in memory-bounded chunks; chunking does not change the paths."""
    for start in range(0, n_paths, chunk_size):
        yield simulate_paths(spec, dt, min(chunk_size, n_paths - start), seed, measure,
                             path_offset=start, refine=refine)


def quadratic_variation(bundle: PathBundle) -> np.ndarray:
    """Cumulative realized covariation ``sum_k dR_k dR_k^T``; shape ``(N, K + 1, n, n)``."""
    if bundle.times.size < 2:
        raise ValueError("quadratic variation needs at least two time points")
    dR = bundle.increments
    outer = dR[..., :, None] * dR[..., None, :]
    qv = np.zeros((bundle.n_paths, bundle.times.size, bundle.n_stocks, bundle.n_stocks))
    np.cumsum(outer, axis=1, out=qv[:, 1:])
    return qv


def rate_integral(bundle: PathBundle) -> np.ndarray:
    """Bank account ``B(t_k) = exp(sum_{j<k} r(t_j) dt)`` with ``B(0) = 1``."""
    B = np.zeros((bundle.n_paths, bundle.times.size))
    np.cumsum(bundle.rates[:, :-1] * bundle.dt, axis=1, out=B[:, 1:])
    return np.exp(B)


def sigma_path(spec: MarketSpec, r_tilde: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Volatility along observed paths at the left grid points.

    Shape ``(K, n, n)`` for deterministic volatility, else ``(N, K, n, n)``.
    """
    K = times.size - 1
    if spec.deterministic_vol:
        return np.stack([spec.sigma(times[k]) for k in range(K)])
    return np.stack([spec.sigma(times[k], r_tilde[:, : k + 1]) for k in range(K)], axis=1)


def precision_path(spec: MarketSpec, r_tilde: np.ndarray, times: np.ndarray) -> np.ndarray:
    """``Q(t_k) = (sigma sigma^T)^{-1}`` along observed paths, same layout as :func:`sigma_path`."""
    sig = sigma_path(spec, r_tilde, times)
    return np.linalg.inv(sig @ np.swapaxes(sig, -1, -2))


def price_paths(spec: MarketSpec, bundle: PathBundle) -> np.ndarray:
    """Stock prices from the excess returns by a log-Euler step (always positive)."""
    sig = sigma_path(spec, bundle.r_tilde, bundle.times)
    var = np.einsum("...ij,...ij->...i", sig, sig)
    if var.ndim == 2:
        var = np.broadcast_to(var, (bundle.n_paths,) + var.shape)
    logS = np.log(spec.initial_prices) + np.zeros((bundle.n_paths, bundle.times.size, bundle.n_stocks))
    step = bundle.increments + (bundle.rates[:, :-1, None] - 0.5 * var) * bundle.dt
    logS[:, 1:] += np.cumsum(step, axis=1)
    return np.exp(logS)
