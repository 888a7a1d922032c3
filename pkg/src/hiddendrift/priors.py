"""Prior laws for the unobservable excess appreciation rate.

Four families are supported:

* :class:`DiscretePrior` -- finitely many drift paths ``theta_i(t)`` with masses ``p_i``.
* :class:`GaussianPrior` -- a static Gaussian vector, drawn once at ``t = 0``.
* :class:`OUPrior` -- a linear (Ornstein-Uhlenbeck type) drift
  ``da = alpha (delta - a) dt + b dR + beta dW`` with Gaussian initial law.
* :class:`MarkovChainPrior` -- drift driven by a finite-state Markov chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_TOL = 1e-12


def _as_vector_fn(value, n: int) -> Callable[[float], np.ndarray]:
    if callable(value):
        return lambda t: np.broadcast_to(np.asarray(value(t), dtype=float), (n,)).copy()
    arr = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    return lambda t: arr


def _as_matrix_fn(value, n: int) -> Callable[[float], np.ndarray]:
    if callable(value):
        def fn(t):
            out = np.asarray(value(t), dtype=float)
            return out * np.eye(n) if out.ndim == 0 else out.reshape(n, n)
        return fn
    arr = np.asarray(value, dtype=float)
    arr = arr * np.eye(n) if arr.ndim == 0 else arr.reshape(n, n)
    return lambda t: arr


def _check_probs(probs: np.ndarray, name: str) -> None:
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array")
    if np.any(probs < 0):
        raise ValueError(f"{name} must be nonnegative")
    if abs(probs.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"{name} must sum to 1 (got {probs.sum()!r})")


def _check_psd(cov: np.ndarray, name: str, tol: float = 1e-12) -> None:
    if not np.allclose(cov, cov.T, atol=1e-14, rtol=0):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(cov).min() < -tol:
        raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class DiscretePrior:
    """Finitely many candidate drift paths.

    ``atoms`` holds either constant n-vectors or callables ``t -> n-vector``
    (vectorized over an array of times, returning shape ``(len(t), n)``).
    """

    atoms: Sequence
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "atoms", tuple(self.atoms))
        _check_probs(probs, "probs")
        if len(self.atoms) != probs.size:
            raise ValueError("atoms and probs must have the same length")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def time_varying(self) -> bool:
        return any(callable(a) for a in self.atoms)

    def drift_paths(self, times: np.ndarray, n: int) -> np.ndarray:
        """Evaluate every atom on ``times``; shape ``(n_atoms, len(times), n)``."""
        times = np.asarray(times, dtype=float)
        out = np.empty((self.n_atoms, times.size, n))
        for i, atom in enumerate(self.atoms):
            if callable(atom):
                vals = np.asarray(atom(times), dtype=float)
                out[i] = vals.reshape(times.size, n)
            else:
                out[i] = np.broadcast_to(np.asarray(atom, dtype=float).reshape(n), (times.size, n))
        return out

    def mean(self, t: float, n: int) -> np.ndarray:
        return self.probs @ self.drift_paths(np.array([t]), n)[:, 0, :]


@dataclass(frozen=True)
class GaussianPrior:
    """Static drift ``a ~ N(mean, cov)`` drawn once per path."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        cov = cov.reshape(mean.size, mean.size)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        _check_psd(cov, "cov")

    def as_ou(self) -> "OUPrior":
        n = self.mean.size
        return OUPrior(alpha=0.0, beta=0.0, b=0.0, delta=np.zeros(n),
                       mean0=self.mean, cov0=self.cov, beta_inv_bound=None)


@dataclass(frozen=True)
class OUPrior:
    """Linear drift ``da = alpha(t)(delta(t) - a) dt + b(t) dR + beta(t) dW``.

    ``beta`` must be invertible with ``|beta^{-1}| <= beta_inv_bound`` unless the
    bound is ``None`` (used for the degenerate static Gaussian case).
    """

    alpha: object
    beta: object
    b: object
    delta: object
    mean0: np.ndarray
    cov0: np.ndarray
    beta_inv_bound: float | None = 1e6

    def __post_init__(self):
        mean0 = np.atleast_1d(np.asarray(self.mean0, dtype=float))
        n = mean0.size
        cov0 = np.asarray(self.cov0, dtype=float)
        cov0 = cov0 * np.eye(n) if cov0.ndim == 0 else cov0.reshape(n, n)
        object.__setattr__(self, "mean0", mean0)
        object.__setattr__(self, "cov0", cov0)
        _check_psd(cov0, "cov0")
        if self.beta_inv_bound is not None:
            beta0 = self.beta_fn(0.0)
            if abs(np.linalg.det(beta0)) < 1e-300:
                raise ValueError("beta(t) must be invertible")
            if np.linalg.norm(np.linalg.inv(beta0), 2) > self.beta_inv_bound:
                raise ValueError("|beta(t)^-1| exceeds beta_inv_bound")

    @property
    def n(self) -> int:
        return self.mean0.size

    @property
    def alpha_fn(self):
        return _as_matrix_fn(self.alpha, self.n)

    @property
    def beta_fn(self):
        return _as_matrix_fn(self.beta, self.n)

    @property
    def b_fn(self):
        return _as_matrix_fn(self.b, self.n)

    @property
    def delta_fn(self):
        return _as_vector_fn(self.delta, self.n)


def _identity_drift(t, value, r_tilde):
    return value


@dataclass(frozen=True)
class MarkovChainPrior:
    """Drift ``A(t, theta(t), R)`` with ``theta`` a finite-state Markov chain.

    ``generator[k, i]`` is the jump intensity from state ``k`` to state ``i``
    (rows sum to zero). It may be a callable of time. ``values`` has shape
    ``(d,)`` or ``(d, n)``.
    """

    values: np.ndarray
    generator: object
    initial_probs: np.ndarray
    drift_map: Callable = field(default=_identity_drift)
    intensity_bound: float = 1e6

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        probs = np.asarray(self.initial_probs, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "initial_probs", probs)
        _check_probs(probs, "initial_probs")
        if values.shape[0] != probs.size:
            raise ValueError("values and initial_probs must have the same length")
        gen = self.generator_at(0.0)
        if gen.shape != (probs.size, probs.size):
            raise ValueError("generator must be d x d")
        off = gen - np.diag(np.diag(gen))
        if np.any(off < 0):
            raise ValueError("off-diagonal intensities must be nonnegative")
        if np.abs(gen.sum(axis=1)).max() > 1e-9:
            raise ValueError("generator rows must sum to zero")
        if np.abs(gen).max() > self.intensity_bound:
            raise ValueError("intensities exceed intensity_bound")

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    def generator_at(self, t: float) -> np.ndarray:
        g = self.generator(t) if callable(self.generator) else self.generator
        return np.asarray(g, dtype=float)

    def drift_values(self, t: float, r_tilde: np.ndarray) -> np.ndarray:
        """``A(t, theta_i, R)`` for every state; shape ``(n_paths, d, n)``."""
        r_tilde = np.atleast_2d(r_tilde)
        out = np.stack([
            np.broadcast_to(np.asarray(self.drift_map(t, v, r_tilde), dtype=float),
                            (r_tilde.shape[0], r_tilde.shape[1]))
            for v in self.values
        ], axis=1)
        return out


Prior = DiscretePrior | GaussianPrior | OUPrior | MarkovChainPrior


def gaussian_grid_prior(prior: GaussianPrior, n_atoms: int = 201, width: float = 6.0) -> DiscretePrior:
    """Discretize a scalar Gaussian prior onto an equispaced grid of atoms.

    Masses are the normalized density values, so the grid prior is a Riemann
    approximation of the Gaussian law on ``mean +- width * sd``.
    """
    if prior.mean.size != 1:
        raise ValueError("grid discretization is implemented for scalar priors")
    m, sd = prior.mean[0], float(np.sqrt(prior.cov[0, 0]))
    nodes = np.linspace(m - width * sd, m + width * sd, n_atoms)
    w = np.exp(-0.5 * ((nodes - m) / sd) ** 2)
    w /= w.sum()
    return DiscretePrior(atoms=[np.array([x]) for x in nodes], probs=w)


def gauss_hermite_prior(prior: GaussianPrior, n_nodes: int = 32) -> DiscretePrior:
    """Tensor-product Gauss-Hermite quadrature of a Gaussian prior."""
    x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    n = prior.mean.size
    evals, evecs = np.linalg.eigh(prior.cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    grids = np.meshgrid(*([x] * n), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.meshgrid(*([w] * n), indexing="ij"), axis=0).ravel()
    atoms = prior.mean + pts @ root.T
    return DiscretePrior(atoms=list(atoms), probs=weights / weights.sum())
