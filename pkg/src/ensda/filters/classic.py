"""Classical ensemble analysis steps.

All ensembles are ``(N, d_v)`` arrays with members as rows.  Every empirical
covariance uses the 1/N normalization so that the learned filter, which shares
this convention, reduces to the stochastic EnKF exactly when its corrections
vanish.  Observation operators are callables mapping ``(N, d_v) -> (N, d_y)``.

Includes:

- ``enkf_analysis``     stochastic (perturbed-observation) update,
- ``esrf_analysis``     deterministic symmetric square-root update,
- ``letkf_analysis``    per-coordinate local transform update,
- ``ienkf_analysis``    Gauss-Newton iteration on the lag-1 smoothing objective,
- ``gaspari_cohn`` / ``LocalizationSpec``   compactly supported tapering,
- ``apply_inflation``   multiplicative anomaly inflation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..numerics import RngStream, solve_spd
from ..validation import check_array, check_ensemble

__all__ = [
    "NonFiniteError",
    "gaspari_cohn",
    "periodic_distance",
    "LocalizationSpec",
    "apply_inflation",
    "ensemble_mean",
    "kalman_gain",
    "enkf_analysis",
    "esrf_analysis",
    "letkf_analysis",
    "ienkf_analysis",
]


class NonFiniteError(RuntimeError):
    """An analysis produced NaN/Inf members (filter divergence)."""


def ensemble_mean(v: np.ndarray) -> np.ndarray:
    """Member-axis mean computed as sum * (1/N).

    This exact operation order is shared with the learned filter's tensor
    path so that the two produce bitwise-identical floats.
    """
    return v.sum(axis=0) * (1.0 / v.shape[0])


def gaspari_cohn(r):
    """Fifth-order piecewise-rational compactly supported taper.

    ``r`` is the normalized distance; full weight at 0, zero for r >= 2.
    Accepts scalars or arrays.
    """
    r = np.abs(np.asarray(r, dtype=float))
    out = np.zeros_like(r)
    near = r <= 1.0
    mid = (r > 1.0) & (r < 2.0)
    x = r[near]
    out[near] = -0.25 * x**5 + 0.5 * x**4 + 0.625 * x**3 - (5.0 / 3.0) * x**2 + 1.0
    x = r[mid]
    out[mid] = (
        x**5 / 12.0
        - 0.5 * x**4
        + 0.625 * x**3
        + (5.0 / 3.0) * x**2
        - 5.0 * x
        + 4.0
        - (2.0 / 3.0) / x
    )
    return out if out.ndim else float(out)


def periodic_distance(i, j, d: int):
    """Wrap-around index distance on a ring of ``d`` points."""
    gap = np.abs(np.asarray(i) - np.asarray(j))
    return np.minimum(gap, d - gap)


@dataclass(frozen=True)
class LocalizationSpec:
    """Distance-based tapering for covariance and observation weighting.

    ``weight(D) = gc(D / (radius * radius_scale))``.  The scale factor makes
    ``radius`` play the role of a Gaussian length scale rather than the taper
    cutoff (support ends at 2 * radius * radius_scale).
    """

    radius: float
    d_state: int
    radius_scale: float = field(default=float(np.sqrt(10.0 / 3.0)))

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("localization radius must be positive")

    def distance(self, i, j):
        return periodic_distance(i, j, self.d_state)

    def weight(self, dist):
        return gaspari_cohn(np.asarray(dist, dtype=float) / (self.radius * self.radius_scale))

    def taper_matrices(self, obs_indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(d_v, d_y) state-obs and (d_y, d_y) obs-obs Hadamard masks."""
        obs_indices = np.asarray(obs_indices)
        state = np.arange(self.d_state)
        l_vh = self.weight(self.distance(state[:, None], obs_indices[None, :]))
        l_hh = self.weight(self.distance(obs_indices[:, None], obs_indices[None, :]))
        return l_vh, l_hh


def apply_inflation(v: np.ndarray, alpha: float) -> np.ndarray:
    """Scale anomalies about the ensemble mean by ``alpha`` (mean preserved)."""
    if alpha < 1.0:
        raise ValueError(f"inflation must be >= 1, got {alpha}")
    mean = ensemble_mean(v)
    return v + (alpha - 1.0) * (v - mean)


def kalman_gain(c_vh: np.ndarray, c_hh_plus_gamma: np.ndarray) -> np.ndarray:
    """K = C_vh (C_hh + Gamma)^{-1} via a Cholesky solve on the SPD factor."""
    return solve_spd(c_hh_plus_gamma, c_vh.T).T


def _obs_perturbations(n: int, gamma: np.ndarray, rng: RngStream) -> np.ndarray:
    z = rng.standard_normal((n, gamma.shape[0]))
    return z @ np.linalg.cholesky(gamma).T


def enkf_analysis(
    forecast: np.ndarray,
    y: np.ndarray,
    h: Callable,
    gamma: np.ndarray,
    rng: RngStream | None = None,
    loc: LocalizationSpec | None = None,
    obs_indices: np.ndarray | None = None,
    obs_noise: np.ndarray | None = None,
) -> np.ndarray:
    """Stochastic analysis: each member assimilates a perturbed observation.

    Observation perturbations come from ``obs_noise`` (pre-scaled, ``(N, d_y)``)
    when given, otherwise they are drawn from ``rng`` with covariance ``gamma``.
    With ``loc`` set, the empirical covariances are Hadamard-masked by the
    taper matrices built from ``obs_indices``.
    """
    v = check_ensemble(forecast, name="forecast")
    n, _ = v.shape
    hv = h(v)
    d_y = hv.shape[1]
    check_array(y, name="y", shape=(d_y,))
    check_array(gamma, name="gamma", shape=(d_y, d_y))
    if obs_noise is None:
        if rng is None:
            raise ValueError("enkf_analysis needs either rng or obs_noise")
        obs_noise = _obs_perturbations(n, gamma, rng)

    mean = ensemble_mean(v)
    h_mean = ensemble_mean(hv)
    anomalies = v - mean
    h_anomalies = hv - h_mean
    c_vh = (anomalies.T @ h_anomalies) * (1.0 / n)
    c_hh = (h_anomalies.T @ h_anomalies) * (1.0 / n)
    if loc is not None:
        if obs_indices is None:
            raise ValueError("localized enkf_analysis needs obs_indices")
        l_vh, l_hh = loc.taper_matrices(obs_indices)
        c_vh = c_vh * l_vh
        c_hh = c_hh * l_hh
    gain = kalman_gain(c_vh, c_hh + gamma)
    innovation = y[None, :] - hv - obs_noise
    return v + innovation @ gain.T


def esrf_analysis(
    forecast: np.ndarray,
    y: np.ndarray,
    h: Callable,
    gamma: np.ndarray,
) -> np.ndarray:
    """Deterministic square-root analysis.

    The mean moves by the standard gain; anomalies are rescaled by the
    symmetric inverse square root of (I + Y Gamma^{-1} Y^T / N) so the
    analysis covariance matches the Kalman update exactly for linear h.
    """
    v = check_ensemble(forecast, name="forecast")
    n, _ = v.shape
    hv = h(v)
    d_y = hv.shape[1]
    check_array(y, name="y", shape=(d_y,))
    check_array(gamma, name="gamma", shape=(d_y, d_y))

    mean = ensemble_mean(v)
    h_mean = ensemble_mean(hv)
    anomalies = v - mean
    h_anomalies = hv - h_mean
    c_vh = (anomalies.T @ h_anomalies) * (1.0 / n)
    c_hh = (h_anomalies.T @ h_anomalies) * (1.0 / n)
    gain = kalman_gain(c_vh, c_hh + gamma)
    mean_a = mean + gain @ (y - h_mean)

    # (N, N) ensemble-space factor; eigenvalues are >= 1 so the inverse
    # square root is well conditioned.
    b = np.eye(n) + (h_anomalies @ solve_spd(gamma, h_anomalies.T)) * (1.0 / n)
    vals, vecs = np.linalg.eigh(b)
    transform = (vecs * (1.0 / np.sqrt(vals))[None, :]) @ vecs.T
    return mean_a[None, :] + transform @ anomalies


def letkf_analysis(
    forecast: np.ndarray,
    y: np.ndarray,
    obs_indices: np.ndarray,
    gamma: np.ndarray,
    loc: LocalizationSpec,
    inflation: float = 1.0,
) -> np.ndarray:
    """Local transform analysis, one ensemble-space solve per state coordinate.

    The observation operator is coordinate subsampling at ``obs_indices``.
    ``gamma`` must be diagonal: each local solve tapers the inverse
    observation variances by the localization weights.  Coordinates with no
    observation inside the taper support keep their forecast values.
    Multiplicative inflation is folded into the transform (equivalent to
    inflating the analysis anomalies afterwards).
    """
    v = check_ensemble(forecast, name="forecast")
    n, d_v = v.shape
    obs_indices = np.asarray(obs_indices)
    d_y = obs_indices.shape[0]
    check_array(y, name="y", shape=(d_y,))
    check_array(gamma, name="gamma", shape=(d_y, d_y))
    diag = np.diag(gamma)
    if not np.allclose(gamma, np.diag(diag)):
        raise ValueError("letkf_analysis requires a diagonal observation covariance")
    if inflation < 1.0:
        raise ValueError(f"inflation must be >= 1, got {inflation}")

    hv = v[:, obs_indices]
    mean = ensemble_mean(v)
    h_mean = ensemble_mean(hv)
    anomalies = v - mean
    h_anomalies = hv - h_mean
    delta = y - h_mean

    analysis = v.copy()
    for k in range(d_v):
        weights = loc.weight(loc.distance(k, obs_indices))
        active = weights > 0.0
        if not np.any(active):
            continue
        r_inv = weights[active] / diag[active]
        y_loc = h_anomalies[:, active]
        hess = n * np.eye(n) + (y_loc * r_inv[None, :]) @ y_loc.T
        vals, vecs = np.linalg.eigh(hess)
        p_tilde = (vecs * (1.0 / vals)[None, :]) @ vecs.T
        w_mean = p_tilde @ (y_loc @ (r_inv * delta[active]))
        w_anom = np.sqrt(n) * (vecs * (1.0 / np.sqrt(vals))[None, :]) @ vecs.T
        weights_full = w_mean[:, None] + inflation * w_anom
        analysis[:, k] = mean[k] + weights_full.T @ anomalies[:, k]
    return analysis


def ienkf_analysis(
    prev_analysis: np.ndarray,
    step: Callable,
    h: Callable,
    gamma: np.ndarray,
    y: np.ndarray,
    max_iter: int = 10,
    tol: float = 1e-5,
    return_info: bool = False,
):
    """Gauss-Newton iteration on the one-step smoothing objective.

    Starting from the previous analysis ensemble, repeatedly re-propagates a
    re-centered ensemble through ``step`` (deterministically), linearizes the
    observation path in ensemble space, and updates the ensemble-space mean
    weight ``w`` and transform ``T``.  Stops when the weight increment norm
    drops below ``tol`` or after ``max_iter`` sweeps.  Returns the propagated
    analysis ensemble at the observation time.
    """
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    v = check_ensemble(prev_analysis, name="prev_analysis")
    n, _ = v.shape
    mean = ensemble_mean(v)
    anomalies = v - mean

    w = np.zeros(n)
    transform = np.eye(n)
    n_iters = 0
    for _ in range(max_iter):
        n_iters += 1
        ens = mean[None, :] + w @ anomalies + transform @ anomalies
        propagated = step(ens)
        hv = h(propagated)
        if not np.all(np.isfinite(hv)):
            raise NonFiniteError("ienkf_analysis: non-finite observations during iteration")
        h_mean = ensemble_mean(hv)
        # De-condition: observed anomalies of the current ensemble live in
        # T-coordinates; solve back to the fixed w-coordinates.
        y_sens = np.linalg.solve(transform, hv - h_mean)
        delta = y - h_mean
        gi_y = solve_spd(gamma, y_sens.T).T  # Gamma^{-1}-weighted sensitivities
        grad = n * w - gi_y @ delta
        hess = n * np.eye(n) + gi_y @ y_sens.T
        vals, vecs = np.linalg.eigh(hess)
        delta_w = (vecs * (1.0 / vals)[None, :]) @ (vecs.T @ grad)
        w = w - delta_w
        transform = np.sqrt(n) * (vecs * (1.0 / np.sqrt(vals))[None, :]) @ vecs.T
        if np.linalg.norm(delta_w) < tol:
            break

    ens = mean[None, :] + w @ anomalies + transform @ anomalies
    analysis = step(ens)
    if not np.all(np.isfinite(analysis)):
        raise NonFiniteError("ienkf_analysis: non-finite analysis ensemble")
    if return_info:
        return analysis, {"n_iters": n_iters, "weight_norm": float(np.linalg.norm(w))}
    return analysis
