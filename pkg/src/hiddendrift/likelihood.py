"""Per-parameter likelihood processes and the mixture density ``Zbar``.

All accumulation happens in the log domain: ``log z(theta, t)`` is a running
sum of ``theta^T Q dR - 0.5 theta^T Q theta dt`` and mixtures are reduced with
log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import softmax


def _check_pd(Q: np.ndarray) -> None:
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Q must be symmetric positive definite") from exc


def log_z_increment(theta_drift, Q, dR, dt: float) -> float:
    """One Ito step of ``log z``: ``theta^T Q dR - 0.5 theta^T Q theta dt``."""
    theta = np.atleast_1d(np.asarray(theta_drift, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    dR = np.atleast_1d(np.asarray(dR, dtype=float))
    _check_pd(Q)
    Qtheta = Q @ theta
    return float(Qtheta @ dR - 0.5 * (theta @ Qtheta) * dt)


def log_z_increments(drift_paths: np.ndarray, Q: np.ndarray, dR: np.ndarray, dt: float) -> np.ndarray:
    """Vectorized increments for many parameters and paths.

    ``drift_paths``: ``(d, K, n)`` drift of each parameter at the left grid points.
    ``Q``: ``(K, n, n)`` or ``(N, K, n, n)``. ``dR``: ``(N, K, n)``.
    Returns ``(N, K, d)``.
    """
    if Q.ndim == 3:
        QA = np.einsum("kij,dkj->dki", Q, drift_paths)
        lin = np.einsum("dki,nki->nkd", QA, dR)
        quad = np.einsum("dki,dki->kd", QA, drift_paths)[None]
    else:
        QA = np.einsum("nkij,dkj->nkdi", Q, drift_paths)
        lin = np.einsum("nkdi,nki->nkd", QA, dR)
        quad = np.einsum("nkdi,dki->nkd", QA, drift_paths)
    return lin - 0.5 * dt * quad


def accumulate_log_z(drift_paths: np.ndarray, Q: np.ndarray, dR: np.ndarray, dt: float) -> np.ndarray:
    """``log z(theta_i, t_k)`` for ``k = 0..K``; shape ``(N, K + 1, d)``, zero at ``t = 0``."""
    inc = log_z_increments(drift_paths, Q, dR, dt)
    out = np.zeros((inc.shape[0], inc.shape[1] + 1, inc.shape[2]))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


@dataclass(frozen=True)
class LikelihoodState:
    """Running log-likelihoods of a finite support at time ``t``.

    ``log_z`` has shape ``(n_paths, d)``; ``weights`` are the prior masses.
    """

    support: np.ndarray
    log_z: np.ndarray
    weights: np.ndarray
    t: float = 0.0

    @classmethod
    def initial(cls, support, weights, n_paths: int = 1) -> "LikelihoodState":
        support = np.asarray(support, dtype=float)
        weights = np.asarray(weights, dtype=float)
        return cls(support=support, log_z=np.zeros((n_paths, weights.size)), weights=weights)

    def step(self, drift: np.ndarray, Q: np.ndarray, dR: np.ndarray, dt: float) -> "LikelihoodState":
        """Advance by one grid step; ``drift`` is ``(d, n)``, ``dR`` is ``(n_paths, n)``."""
        inc = log_z_increments(np.asarray(drift)[:, None, :], np.asarray(Q)[None], np.asarray(dR)[:, None, :], dt)
        return replace(self, log_z=self.log_z + inc[:, 0, :], t=self.t + dt)

    @property
    def log_mixture(self) -> np.ndarray:
        return mixture_log_density(np.log(self.weights), self.log_z)

    def posterior(self) -> np.ndarray:
        return posterior_weights(np.log(self.weights), self.log_z)


def mixture_log_density(log_weights: np.ndarray, log_z: np.ndarray) -> np.ndarray:
    """``log Zbar = log sum_i w_i z_i`` along the last axis."""
    return np.logaddexp.reduce(log_z + log_weights, axis=-1)


def mixture_density(state: LikelihoodState | tuple) -> np.ndarray:
    """``Zbar(t) = sum_i w_i z(theta_i, t)``, reduced in the log domain."""
    if isinstance(state, LikelihoodState):
        return np.exp(state.log_mixture)
    log_weights, log_z = state
    return np.exp(mixture_log_density(log_weights, log_z))


def posterior_weights(log_weights: np.ndarray, log_z: np.ndarray) -> np.ndarray:
    """Normalized ``w_i z_i / Zbar``."""
    return softmax(log_z + log_weights, axis=-1)


def zbar_exponential(ahat: np.ndarray, Q: np.ndarray, dR: np.ndarray, dt: float) -> np.ndarray:
    """``Zbar(t) = exp(int ahat^T Q dR - 0.5 int ahat^T Q ahat ds)`` with left-point sums.

    ``ahat`` is ``(N, K + 1, n)`` (only the first ``K`` points are used), ``Q``
    is ``(K, n, n)`` or ``(N, K, n, n)`` and ``dR`` is ``(N, K, n)``.
    Returns ``(N, K + 1)``.
    """
    N, K, n = dR.shape
    if ahat.shape[:2] != (N, K + 1) or Q.shape[-3] != K:
        raise ValueError("filter path, precision path and increments are on different grids")
    a = ahat[:, :-1]
    Qa = np.einsum("kij,nkj->nki", Q, a) if Q.ndim == 3 else np.einsum("nkij,nkj->nki", Q, a)
    inc = np.einsum("nki,nki->nk", Qa, dR) - 0.5 * dt * np.einsum("nki,nki->nk", Qa, a)
    out = np.zeros((N, K + 1))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return np.exp(out)


def gaussian_log_zbar(mean: np.ndarray, cov: np.ndarray, Y: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``log E exp(theta^T Y - 0.5 theta^T S theta)`` for ``theta ~ N(mean, cov)``.

    ``Y = sum Q dR`` and ``S = sum Q dt`` are the sufficient statistics of a
    static drift, so this is the exact mixture density of a Gaussian prior.
    ``Y`` has shape ``(..., n)``; ``S`` is ``(n, n)``.
    """
    n = mean.size
    A = np.eye(n) + cov @ S
    _, logdet = np.linalg.slogdet(A)
    # (I + C S)^{-1} C stands in for (S + C^{-1})^{-1}, so singular C is fine
    M = np.linalg.solve(A, cov)
    u = Y - S @ mean
    quad = np.einsum("...i,ij,...j->...", u, M, u)
    return -0.5 * logdet + Y @ mean - 0.5 * mean @ S @ mean + 0.5 * quad
