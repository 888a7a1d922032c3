"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .market import PathBundle


def check_paths(X, horizon: float, n_stocks: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(r_tilde, times)`` from a :class:`PathBundle` or a level array.

    Arrays are excess-return levels of shape ``(n_paths, K + 1, n)`` (or
    ``(n_paths, K + 1)`` for one stock) on the uniform grid over ``[0, T]``.
    """
    if isinstance(X, PathBundle):
        r, times = X.r_tilde, X.times
    else:
        r = np.asarray(X, dtype=float)
        if r.ndim == 2 and n_stocks == 1:
            r = r[..., None]
        if r.ndim != 3:
            raise ValueError(f"expected paths of shape (n_paths, K + 1, n), got {r.shape}")
        K = r.shape[1] - 1
        times = np.linspace(0.0, horizon, K + 1)
    if r.shape[1] < 2:
        raise ValueError("paths need at least two time points")
    if r.shape[2] != n_stocks:
        raise ValueError(f"paths have {r.shape[2]} components, market has {n_stocks}")
    if not np.all(np.isfinite(r)):
        raise ValueError("paths contain non-finite values")
    if abs(times[-1] - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("paths do not span the market horizon")
    return r, times


def check_same_grid(times: np.ndarray, fitted: np.ndarray) -> None:
    if times.shape != fitted.shape or not np.allclose(times, fitted, rtol=0, atol=1e-12):
        raise ValueError("paths are on a different time grid than the one used in fit")
