"""Assimilation runner and estimator-style front end.

``run_assimilation`` advances one filter over one truth run and records the
per-step analysis means.  Every method consumes the identical noise schedule
— per cycle, one process-noise block then one observation-noise block from a
per-cycle child stream — so runs with different methods but the same seed see
the same forecasts, and the learned filter with zeroed heads reproduces the
stochastic EnKF run for run.  Deterministic methods draw (and discard) the
observation block to keep the schedule method-independent.

The estimator classes wrap the runner in a fit/predict interface with
``get_params``/``set_params`` for grid-search style composition.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass

import numpy as np

from ..dynamics.truth import TruthRun
from ..learned import DistanceTable, MnmefConfig, ParamStore, mnmef_step
from ..numerics import NotSPDError, RngStream
from .classic import (
    LocalizationSpec,
    NonFiniteError,
    apply_inflation,
    enkf_analysis,
    esrf_analysis,
    ienkf_analysis,
    letkf_analysis,
)

__all__ = [
    "RunRecord",
    "initial_ensemble",
    "run_assimilation",
    "EnKF",
    "ESRF",
    "LETKF",
    "IEnKF",
    "MNMEF",
]

METHOD_NAMES = ("enkf", "esrf", "letkf", "ienkf", "mnmef")


@dataclass
class RunRecord:
    """Everything one assimilation run produced.

    ``means[j]`` is the analysis mean after assimilating ``observations[j]``
    (which belongs to ``truth[j + 1]``).  On divergence, ``means`` holds NaN
    from the failed cycle onward and ``n_steps_completed`` marks the last
    good cycle.
    """

    method: str
    system: str
    n_members: int
    seed: int
    truth: np.ndarray
    observations: np.ndarray
    means: np.ndarray
    diverged: bool
    n_steps_completed: int
    final_ensemble: np.ndarray | None = None
    ensembles: np.ndarray | None = None  # (J, N, d_v) analysis members when collected

    @property
    def n_steps(self) -> int:
        return self.observations.shape[0]


def initial_ensemble(truth0: np.ndarray, n_members: int, rng: RngStream) -> np.ndarray:
    """Members drawn around the true initial state with identity covariance."""
    return truth0[None, :] + rng.standard_normal((n_members, truth0.shape[0]))


def _cycle_noise(rng: RngStream, j: int, n: int, system) -> tuple[np.ndarray, np.ndarray]:
    step_rng = rng.child(j + 1)
    xi = step_rng.child(0).standard_normal((n, system.d_v)) * system.sigma_v
    eta = step_rng.child(1).standard_normal((n, system.d_y)) * system.sigma_y
    return xi, eta


def run_assimilation(
    method: str,
    system,
    truth_run: TruthRun,
    n_members: int,
    seed: int,
    inflation: float = 1.0,
    loc_radius: float | None = None,
    model: tuple[ParamStore, MnmefConfig, DistanceTable | None] | None = None,
    zero_heads: bool = False,
    disable_inflation: bool = False,
    keep_final_ensemble: bool = False,
    collect_ensembles: bool = False,
) -> RunRecord:
    """Run one filter over one truth run.

    ``model`` supplies (parameters, config, distance table) for the learned
    method and is ignored otherwise.  ``loc_radius`` enables Gaspari-Cohn
    localization for enkf and selects the LETKF radius (mandatory there).
    """
    if method not in METHOD_NAMES:
        raise ValueError(f"unknown method {method!r}; expected one of {METHOD_NAMES}")
    if method == "letkf" and loc_radius is None:
        raise ValueError("letkf requires loc_radius")
    if method == "mnmef":
        if model is None:
            raise ValueError("mnmef requires model=(params, config, table)")
        store, config, table = model
        params_t = store.as_tensors(None)

    loc = None
    if loc_radius is not None and method in ("enkf", "letkf"):
        loc = LocalizationSpec(radius=float(loc_radius), d_state=system.d_v)

    rng = RngStream(seed)
    n_steps, d_v = truth_run.observations.shape[0], system.d_v
    v = initial_ensemble(truth_run.states[0], n_members, rng.child(0))
    means = np.full((n_steps, d_v), np.nan)
    ensembles = np.full((n_steps, n_members, d_v), np.nan) if collect_ensembles else None
    diverged = False
    completed = 0

    for j in range(n_steps):
        y = truth_run.observations[j]
        xi, eta = _cycle_noise(rng, j, n_members, system)
        try:
            if method == "mnmef":
                out = mnmef_step(
                    v[None], y[None], system, params_t, config, xi[None], eta[None],
                    table=table, zero_heads=zero_heads, disable_inflation=disable_inflation,
                )
                v = out.value[0]
            elif method == "ienkf":
                # Gauss-Newton smoother re-propagates the previous analysis
                # itself; the cycle's process-noise realization is fixed so
                # the map stays deterministic across iterations.
                v = ienkf_analysis(v, lambda u: system.step(u) + xi, system.observe, system.gamma(), y)
                if inflation != 1.0:
                    v = apply_inflation(v, inflation)
            else:
                forecast = system.step(v) + xi
                if not np.all(np.isfinite(forecast)):
                    raise NonFiniteError(f"forecast diverged at cycle {j}")
                if method == "enkf":
                    v = enkf_analysis(
                        forecast, y, system.observe, system.gamma(),
                        loc=loc, obs_indices=system.obs_indices, obs_noise=eta,
                    )
                elif method == "esrf":
                    v = esrf_analysis(forecast, y, system.observe, system.gamma())
                else:
                    v = letkf_analysis(
                        forecast, y, system.obs_indices, system.gamma(), loc, inflation=inflation,
                    )
                if method in ("enkf", "esrf") and inflation != 1.0:
                    v = apply_inflation(v, inflation)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"analysis diverged at cycle {j}")
        except (NonFiniteError, NotSPDError, np.linalg.LinAlgError):
            diverged = True
            break
        means[j] = v.mean(axis=0)
        if collect_ensembles:
            ensembles[j] = v
        completed = j + 1

    return RunRecord(
        method=method,
        system=system.name,
        n_members=n_members,
        seed=seed,
        truth=truth_run.states,
        observations=truth_run.observations,
        means=means,
        diverged=diverged,
        n_steps_completed=completed,
        final_ensemble=v.copy() if keep_final_ensemble and not diverged else None,
        ensembles=ensembles,
    )


# ---------------------------------------------------------------------------
# estimator front end


class _BaseFilter:
    """fit/predict wrapper over :func:`run_assimilation`.

    Subclasses list their constructor arguments; ``get_params``/``set_params``
    expose them by introspection so external tooling can clone and retune
    instances.  ``fit`` runs the filter over one truth run; ``predict``
    returns the recorded analysis means.
    """

    _method: str = ""

    def _param_names(self) -> list[str]:
        sig = inspect.signature(type(self).__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "_BaseFilter":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def _runner_kwargs(self) -> dict:
        return {}

    def fit(self, truth_run: TruthRun, system) -> "_BaseFilter":
        self.record_ = run_assimilation(
            self._method,
            system,
            truth_run,
            n_members=self.n_members,
            seed=self.seed,
            **self._runner_kwargs(),
        )
        self.means_ = self.record_.means
        return self

    def predict(self) -> np.ndarray:
        if not hasattr(self, "record_"):
            raise RuntimeError("call fit before predict")
        return self.means_


class EnKF(_BaseFilter):
    """Perturbed-observation ensemble Kalman filter."""

    _method = "enkf"

    def __init__(self, n_members: int = 10, inflation: float = 1.0, loc_radius: float | None = None, seed: int = 0):
        self.n_members = n_members
        self.inflation = inflation
        self.loc_radius = loc_radius
        self.seed = seed

    def _runner_kwargs(self):
        return {"inflation": self.inflation, "loc_radius": self.loc_radius}


class ESRF(_BaseFilter):
    """Deterministic square-root ensemble filter (no localization)."""

    _method = "esrf"

    def __init__(self, n_members: int = 10, inflation: float = 1.0, seed: int = 0):
        self.n_members = n_members
        self.inflation = inflation
        self.seed = seed

    def _runner_kwargs(self):
        return {"inflation": self.inflation}


class LETKF(_BaseFilter):
    """Local ensemble transform Kalman filter."""

    _method = "letkf"

    def __init__(self, n_members: int = 10, inflation: float = 1.0, loc_radius: float = 1.0, seed: int = 0):
        self.n_members = n_members
        self.inflation = inflation
        self.loc_radius = loc_radius
        self.seed = seed

    def _runner_kwargs(self):
        return {"inflation": self.inflation, "loc_radius": self.loc_radius}


class IEnKF(_BaseFilter):
    """Iterative (Gauss-Newton) ensemble Kalman filter."""

    _method = "ienkf"

    def __init__(self, n_members: int = 10, inflation: float = 1.0, seed: int = 0):
        self.n_members = n_members
        self.inflation = inflation
        self.seed = seed

    def _runner_kwargs(self):
        return {"inflation": self.inflation}


class MNMEF(_BaseFilter):
    """Learned ensemble filter driven by a parameter checkpoint."""

    _method = "mnmef"

    def __init__(
        self,
        store: ParamStore = None,
        config: MnmefConfig = None,
        table: DistanceTable | None = None,
        n_members: int = 10,
        seed: int = 0,
        zero_heads: bool = False,
        disable_inflation: bool = False,
    ):
        self.store = store
        self.config = config
        self.table = table
        self.n_members = n_members
        self.seed = seed
        self.zero_heads = zero_heads
        self.disable_inflation = disable_inflation

    def _runner_kwargs(self):
        if self.store is None or self.config is None:
            raise ValueError("MNMEF needs store and config before fit")
        return {
            "model": (self.store, self.config, self.table),
            "zero_heads": self.zero_heads,
            "disable_inflation": self.disable_inflation,
        }
