"""Ensemble and exact filters."""

from .classic import (
    LocalizationSpec,
    NonFiniteError,
    apply_inflation,
    enkf_analysis,
    ensemble_mean,
    esrf_analysis,
    gaspari_cohn,
    ienkf_analysis,
    kalman_gain,
    letkf_analysis,
    periodic_distance,
)
from .api import ESRF, LETKF, MNMEF, EnKF, IEnKF, RunRecord, initial_ensemble, run_assimilation
from .kalman import KalmanBelief, kalman_predict, kalman_step, kalman_update

__all__ = [
    "EnKF",
    "ESRF",
    "IEnKF",
    "LETKF",
    "MNMEF",
    "RunRecord",
    "initial_ensemble",
    "run_assimilation",
    "LocalizationSpec",
    "NonFiniteError",
    "apply_inflation",
    "enkf_analysis",
    "ensemble_mean",
    "esrf_analysis",
    "gaspari_cohn",
    "ienkf_analysis",
    "kalman_gain",
    "letkf_analysis",
    "periodic_distance",
    "KalmanBelief",
    "kalman_predict",
    "kalman_step",
    "kalman_update",
]
