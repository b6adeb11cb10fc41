"""Metrics, grid search, and the linear-Gaussian benchmark experiment.

The headline score is the relative RMSE of a run: summed Euclidean errors of
the analysis means over summed truth norms.  Reports aggregate per-trajectory
scores into mean and standard deviation; diverged runs score infinity so
averages rank them last without hiding them.

``linear_experiment`` trains the learned filter on a marginally stable linear
system where the exact filtering distribution is Gaussian and computable by
the Kalman filter, then tracks the Wasserstein-2 distance between the
ensemble's empirical Gaussian and the exact one, against a baseline of i.i.d.
samples drawn from the exact Gaussian at the same ensemble size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import generate_truth_batch, make_system
from .dynamics.systems import rotation_matrix
from .filters.api import RunRecord, run_assimilation
from .filters.kalman import KalmanBelief, kalman_step
from .learned import DistanceTable, MnmefConfig, ParamStore
from .numerics import RngStream
from .training import TrainConfig, TrainingDivergence, pretrain

__all__ = [
    "DegenerateTruthError",
    "AllDivergedError",
    "MetricReport",
    "r_rmse",
    "run_r_rmse",
    "relative_improvement",
    "w2_gaussian",
    "evaluate_method",
    "GridSearchResult",
    "grid_search",
    "LinearExperimentConfig",
    "LinearExperimentResult",
    "linear_experiment",
    "write_metrics_csv",
    "write_summary_csv",
    "write_heatmap_csv",
    "write_linear_curve_csv",
]


class DegenerateTruthError(ValueError):
    """Truth trajectory has (near-)zero total norm; the relative score is undefined."""


class AllDivergedError(RuntimeError):
    """Every grid cell diverged; there is no optimum to report."""


# ---------------------------------------------------------------------------
# metrics


def r_rmse(means: np.ndarray, truth: np.ndarray) -> float:
    """Relative RMSE: sum_j ||mean_j - truth_j|| / sum_j ||truth_j||."""
    means = np.asarray(means, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if means.shape != truth.shape:
        raise ValueError(f"shape mismatch: means {means.shape} vs truth {truth.shape}")
    denominator = float(np.sum(np.linalg.norm(truth, axis=-1)))
    if denominator < 1e-12:
        raise DegenerateTruthError("truth trajectory has zero norm")
    return float(np.sum(np.linalg.norm(means - truth, axis=-1)) / denominator)


def run_r_rmse(record: RunRecord) -> float:
    """Score one run; diverged or non-finite runs score infinity."""
    if record.diverged or not np.all(np.isfinite(record.means)):
        return float("inf")
    return r_rmse(record.means, record.truth[1:])


def relative_improvement(ours: float, benchmark: float) -> float:
    """(benchmark - ours) / benchmark; negative when ours is worse."""
    if not benchmark > 0:
        raise ZeroDivisionError("benchmark score must be positive")
    return (benchmark - ours) / benchmark


def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(c)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def w2_gaussian(m1, c1, m2, c2) -> float:
    """Wasserstein-2 distance between two Gaussians (closed form).

    ``W2^2 = ||m1-m2||^2 + Tr(C1 + C2 - 2 (C2^{1/2} C1 C2^{1/2})^{1/2})``;
    the trace term is clamped at zero against eigenvalue roundoff.
    """
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    root2 = _sqrtm_psd(c2)
    cross = np.linalg.eigvalsh(root2 @ c1 @ root2)
    trace_term = float(np.trace(c1) + np.trace(c2) - 2.0 * np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    total = float(np.sum((m1 - m2) ** 2)) + max(trace_term, 0.0)
    return float(np.sqrt(max(total, 0.0)))


@dataclass
class MetricReport:
    """Per-trajectory scores for one (method, system, N, noise) cell."""

    method: str
    system: str
    n_members: int
    sigma_y: float
    seed: int
    per_trajectory: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_trajectory))

    @property
    def std(self) -> float:
        return float(np.std(self.per_trajectory))

    @property
    def n_diverged(self) -> int:
        return int(np.sum(~np.isfinite(self.per_trajectory)))


def evaluate_method(
    method: str,
    system,
    truth_runs,
    n_members: int,
    seed: int,
    **runner_kwargs,
) -> MetricReport:
    """Score a filter over a list of truth runs (one run per trajectory).

    Trajectory ``i`` runs with seed ``seed + i``, so different methods and
    tuning cells see common random numbers.
    """
    scores = np.array(
        [
            run_r_rmse(
                run_assimilation(method, system, run, n_members, seed + i, **runner_kwargs)
            )
            for i, run in enumerate(truth_runs)
        ]
    )
    return MetricReport(
        method=method,
        system=system.name,
        n_members=n_members,
        sigma_y=system.sigma_y,
        seed=seed,
        per_trajectory=scores,
    )


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridSearchResult:
    method: str
    best_inflation: float
    best_radius: float | None
    best_score: float
    rows: list = field(default_factory=list)  # (inflation, radius, mean score)


def grid_search(
    method: str,
    system,
    truth_runs,
    n_members: int,
    inflation_grid,
    radius_grid=(None,),
    seed: int = 0,
    heatmap_path=None,
    **runner_kwargs,
) -> GridSearchResult:
    """Exhaustive (inflation, radius) search minimizing mean relative RMSE.

    Ties break toward smaller inflation, then smaller radius.  Cells where
    every trajectory diverges score infinity; if *all* cells do, raises
    :class:`AllDivergedError`.
    """
    inflation_grid = list(inflation_grid)
    radius_grid = list(radius_grid)
    if not inflation_grid or not radius_grid:
        raise ValueError("grids must be nonempty")
    rows = []
    best = None
    for alpha in sorted(inflation_grid):
        for radius in sorted(radius_grid, key=lambda r: (r is not None, r)):
            report = evaluate_method(
                method, system, truth_runs, n_members, seed,
                inflation=alpha, loc_radius=radius, **runner_kwargs,
            )
            rows.append((alpha, radius, report.mean))
            if np.isfinite(report.mean) and (best is None or report.mean < best[2]):
                best = (alpha, radius, report.mean)
    if best is None:
        raise AllDivergedError(f"every ({method}) grid cell diverged")
    if heatmap_path is not None:
        write_heatmap_csv(heatmap_path, rows)
    return GridSearchResult(
        method=method,
        best_inflation=best[0],
        best_radius=best[1],
        best_score=best[2],
        rows=rows,
    )


# ---------------------------------------------------------------------------
# linear-Gaussian experiment


@dataclass(frozen=True)
class LinearExperimentConfig:
    """Desk-scale linear benchmark; the documented full scale uses 64 test
    trajectories of length 500."""

    n_members: int = 10
    train_trajectories: int = 64
    train_steps: int = 30
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 1e-3
    j0: int = 5
    weight_decay: float = 1e-2
    test_trajectories: int = 16
    test_steps: int = 100
    seed: int = 0

    # the four loss settings: normalized loss or not, weight decay or not
    SETTINGS = ("nl2_wd", "nl2", "l2_wd", "l2")


@dataclass
class LinearExperimentResult:
    setting: str
    curve: list  # (epoch, mean W2) pairs; epoch 0 is the untrained model
    baseline_w2: float
    diverged_at: int | None = None


def _kalman_reference(system, truth_run):
    """Exact per-step filtering Gaussians for one linear truth run."""
    a = rotation_matrix()
    h = np.eye(system.d_v)[system.obs_indices]
    sigma = (system.sigma_v**2) * np.eye(system.d_v)
    gamma = system.gamma()
    belief = KalmanBelief(mean=truth_run.states[0].copy(), cov=np.eye(system.d_v))
    beliefs = []
    for j in range(truth_run.n_steps):
        belief = kalman_step(belief, a, h, sigma, gamma, truth_run.observations[j])
        beliefs.append(belief)
    return beliefs


def _mean_w2_to_reference(system, truth_runs, beliefs_per_run, model, n_members, seed):
    """Time-averaged W2 between the learned filter's empirical Gaussian and
    the exact filtering Gaussian, averaged over runs.  Returns inf if any
    run diverges."""
    store, config, table = model
    totals = []
    for i, (run, beliefs) in enumerate(zip(truth_runs, beliefs_per_run)):
        record = run_assimilation(
            "mnmef", system, run, n_members, seed + i, model=(store, config, table),
            collect_ensembles=True,
        )
        if record.diverged:
            return float("inf")
        w2s = [
            w2_gaussian(
                ens.mean(axis=0),
                np.cov(ens, rowvar=False, bias=True),
                belief.mean,
                belief.cov,
            )
            for ens, belief in zip(record.ensembles, beliefs)
        ]
        totals.append(float(np.mean(w2s)))
    return float(np.mean(totals))


def _sampling_baseline(system, beliefs_per_run, n_members, seed) -> float:
    """W2 of the empirical Gaussian of n i.i.d. draws from the exact
    filtering Gaussian, time- and run-averaged."""
    rng = RngStream(seed)
    totals = []
    for i, beliefs in enumerate(beliefs_per_run):
        rng_run = rng.child(i)
        w2s = []
        for j, belief in enumerate(beliefs):
            root = _sqrtm_psd(belief.cov)
            draws = belief.mean + rng_run.child(j).standard_normal(
                (n_members, system.d_v)
            ) @ root.T
            w2s.append(
                w2_gaussian(
                    draws.mean(axis=0),
                    np.cov(draws, rowvar=False, bias=True),
                    belief.mean,
                    belief.cov,
                )
            )
        totals.append(float(np.mean(w2s)))
    return float(np.mean(totals))


def linear_experiment(config: LinearExperimentConfig, out_dir=None) -> list[LinearExperimentResult]:
    """Train the learned filter on the linear system under the four loss
    settings and track its distance to the exact filtering distribution."""
    system = make_system("linear")
    train_runs = generate_truth_batch(
        system, config.train_steps, config.seed, range(config.train_trajectories)
    )
    test_runs = generate_truth_batch(
        system, config.test_steps, config.seed + 1, range(config.test_trajectories)
    )
    beliefs_per_run = [_kalman_reference(system, run) for run in test_runs]
    baseline = _sampling_baseline(system, beliefs_per_run, config.n_members, config.seed + 2)

    results = []
    for setting in LinearExperimentConfig.SETTINGS:
        normalized = setting.startswith("nl2")
        weight_decay = config.weight_decay if setting.endswith("_wd") else 0.0
        train_config = TrainConfig(
            system="linear",
            n_trajectories=config.train_trajectories,
            n_steps=config.train_steps,
            n_members=config.n_members,
            epochs=config.epochs,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            j0=config.j0,
            weight_decay=weight_decay,
            seed=config.seed,
            loss_normalized=normalized,
        )
        mnmef_config = MnmefConfig.for_system(system, config.n_members, j0=config.j0)
        curve = []
        diverged_at = None

        def evaluate_store(epoch, store):
            score = _mean_w2_to_reference(
                system, test_runs, beliefs_per_run,
                (store, mnmef_config, None), config.n_members, config.seed + 3,
            )
            curve.append((epoch, score))

        # epoch 0: the untrained model (zero-init heads), bitwise identical
        # to the store pretrain starts from
        fresh = ParamStore.init(RngStream(config.seed).child(0), mnmef_config, None)
        evaluate_store(0, fresh)
        try:
            pretrain(
                train_config, system, list(train_runs),
                epoch_callback=lambda e, s: evaluate_store(e + 1, s),
            )
        except TrainingDivergence:
            diverged_at = len(curve) - 1
        if any(not np.isfinite(score) for _, score in curve) and diverged_at is None:
            diverged_at = next(e for e, score in curve if not np.isfinite(score))
        results.append(
            LinearExperimentResult(
                setting=setting, curve=curve, baseline_w2=baseline, diverged_at=diverged_at
            )
        )
    if out_dir is not None:
        write_linear_curve_csv(out_dir / "linear_experiment.csv", results)
    return results


# ---------------------------------------------------------------------------
# CSV writers


def write_metrics_csv(path, reports: list[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "system", "n_members", "sigma_y", "seed", "trajectory", "r_rmse"])
        for report in reports:
            for i, score in enumerate(report.per_trajectory):
                writer.writerow(
                    [report.method, report.system, report.n_members,
                     repr(report.sigma_y), report.seed, i, repr(float(score))]
                )


def write_summary_csv(path, reports: list[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "system", "n_members", "sigma_y", "mean_r_rmse", "std_r_rmse"])
        for report in reports:
            writer.writerow(
                [report.method, report.system, report.n_members,
                 repr(report.sigma_y), repr(report.mean), repr(report.std)]
            )


def write_heatmap_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["inflation", "radius", "mean_r_rmse"])
        for alpha, radius, score in rows:
            writer.writerow([repr(alpha), "" if radius is None else repr(radius), repr(score)])


def write_linear_curve_csv(path, results: list[LinearExperimentResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "epoch", "w2", "baseline_w2"])
        for result in results:
            for epoch, score in result.curve:
                writer.writerow([result.setting, epoch, repr(score), repr(result.baseline_w2)])
