"""Exact Kalman filter for linear-Gaussian reference solutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import solve_spd
from ..validation import check_array

__all__ = ["KalmanBelief", "kalman_predict", "kalman_update", "kalman_step"]


@dataclass(frozen=True)
class KalmanBelief:
    """Gaussian state estimate (mean, covariance)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        d = self.mean.shape[0]
        check_array(self.mean, name="mean", ndim=1)
        check_array(self.cov, name="cov", shape=(d, d))


def kalman_predict(belief: KalmanBelief, a: np.ndarray, sigma: np.ndarray) -> KalmanBelief:
    """Push the belief through v -> A v + N(0, Sigma)."""
    mean = a @ belief.mean
    cov = a @ belief.cov @ a.T + sigma
    return KalmanBelief(mean, cov)


def kalman_update(belief: KalmanBelief, h: np.ndarray, gamma: np.ndarray, y: np.ndarray) -> KalmanBelief:
    """Condition the belief on y = H v + N(0, Gamma)."""
    c_vh = belief.cov @ h.T
    s = h @ c_vh + gamma
    gain = solve_spd(s, c_vh.T).T
    mean = belief.mean + gain @ (y - h @ belief.mean)
    cov = belief.cov - gain @ c_vh.T
    cov = 0.5 * (cov + cov.T)
    return KalmanBelief(mean, cov)


def kalman_step(
    belief: KalmanBelief,
    a: np.ndarray,
    h: np.ndarray,
    sigma: np.ndarray,
    gamma: np.ndarray,
    y: np.ndarray,
) -> KalmanBelief:
    """One predict-update cycle of the exact filter."""
    return kalman_update(kalman_predict(belief, a, sigma), h, gamma, y)
