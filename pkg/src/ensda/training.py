"""Training loop for the learned filter.

A model is trained by unrolling the filter over length-J trajectories and
penalizing the relative squared error of the analysis mean at every step.
Backpropagation is truncated: the unroll is cut into windows of ``j0`` steps,
each window runs on a fresh tape whose input ensemble is the previous
window's output *value* (gradient-detached), and window gradients accumulate.
The loss value is exactly the untruncated loss; only gradients are windowed.

Optimization is AdamW written out explicitly: decoupled weight decay shrinks
parameters multiplicatively and never touches the moment estimates.

``pretrain`` trains all partitions from scratch; ``finetune`` freezes the
encoder partition ("st"), halves the trajectory budget, divides the learning
rate by 10, and re-runs the same loop at a new ensemble size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .learned import DistanceTable, MnmefConfig, ParamStore, mnmef_step, save_checkpoint
from .numerics import RngStream

__all__ = [
    "TrainConfig",
    "TrainingDivergence",
    "EpochRecord",
    "trajectory_loss",
    "batch_loss_and_grads",
    "OptimizerState",
    "adamw_step",
    "pretrain",
    "finetune",
    "finetune_config",
    "write_training_log",
    "paper_scale_config",
]

DEGENERATE_TRUTH_NORM = 1e-8


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; training aborts with the failing epoch/batch."""


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; see :func:`paper_scale_config` for the full budget."""

    system: str = "lorenz63"
    n_trajectories: int = 256
    n_steps: int = 30
    n_members: int = 10
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    j0: int = 5
    weight_decay: float = 0.0
    seed: int = 0
    loss_normalized: bool = True
    finetune_epochs: int = 5

    def __post_init__(self):
        if self.j0 < 1:
            raise ValueError("j0 must be at least 1")
        if self.n_members < 2:
            raise ValueError("need at least two ensemble members")


def paper_scale_config(system_name: str) -> TrainConfig:
    """Full training budget per system: 8192 trajectories of 60 steps, 1000
    epochs, with the published per-system batch size and learning rate."""
    per_system = {
        "lorenz63": dict(batch_size=1024, learning_rate=1e-3),
        "lorenz96": dict(batch_size=512, learning_rate=1e-3),
        "ks": dict(batch_size=256, learning_rate=5e-4),
    }
    if system_name not in per_system:
        raise ValueError(f"no published budget for system {system_name!r}")
    return TrainConfig(
        system=system_name,
        n_trajectories=8192,
        n_steps=60,
        n_members=10,
        epochs=1000,
        j0=5,
        finetune_epochs=20,
        **per_system[system_name],
    )


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    wall_time: float


# ---------------------------------------------------------------------------
# loss


def trajectory_loss(means: np.ndarray, truth: np.ndarray, normalized: bool = True) -> float:
    """Mean over steps of the squared error of the trajectory of means,
    step-normalized by the squared truth norm.  Steps where the truth norm
    falls below 1e-8 contribute their unnormalized error instead.
    """
    means = np.asarray(means, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if means.shape != truth.shape:
        raise ValueError(f"shape mismatch: means {means.shape} vs truth {truth.shape}")
    err = np.sum((means - truth) ** 2, axis=-1)
    if not normalized:
        return float(np.mean(err))
    denom = np.sum(truth**2, axis=-1)
    scale = np.where(np.sqrt(denom) < DEGENERATE_TRUTH_NORM, 1.0, denom)
    return float(np.mean(err / scale))


def _step_weights(truth_steps: np.ndarray, n_steps: int, batch: int, normalized: bool) -> np.ndarray:
    """Per-(trajectory, step) loss weights so that summing weighted squared
    errors over the whole batch yields the batch-mean trajectory loss."""
    base = np.full(truth_steps.shape[:2], 1.0 / (n_steps * batch))
    if not normalized:
        return base
    denom = np.sum(truth_steps**2, axis=-1)
    scale = np.where(np.sqrt(denom) < DEGENERATE_TRUTH_NORM, 1.0, denom)
    return base / scale


# ---------------------------------------------------------------------------
# truncated unroll


def _training_noise(rng_cycle: RngStream, batch: int, n: int, system):
    xi = rng_cycle.child(0).standard_normal((batch, n, system.d_v)) * system.sigma_v
    eta = rng_cycle.child(1).standard_normal((batch, n, system.d_y)) * system.sigma_y
    return xi, eta


def batch_loss_and_grads(
    store: ParamStore,
    mnmef_config: MnmefConfig,
    system,
    table: DistanceTable | None,
    truths: np.ndarray,
    observations: np.ndarray,
    v0: np.ndarray,
    noise_rng: RngStream,
    j0: int,
    normalized: bool = True,
    compute_grads: bool = True,
):
    """Unroll one mini-batch and return (loss value, gradient dict).

    ``truths``: (B, J+1, d_v), ``observations``: (B, J, d_y), ``v0``:
    (B, N, d_v).  Gradients are keyed ``(partition, key)`` over the store's
    unfrozen parameters; the truncation window is ``j0`` steps.
    """
    batch, n_steps = observations.shape[0], observations.shape[1]
    n = v0.shape[1]
    weights = _step_weights(truths[:, 1:], n_steps, batch, normalized)
    grads = {
        (name, key): np.zeros_like(arr) for name, key, arr in store.trainable_arrays()
    } if compute_grads else {}

    total = 0.0
    v_value = np.asarray(v0, dtype=np.float64)
    j = 0
    while j < n_steps:
        stop = min(j + j0, n_steps)
        tape = ad.Tape() if compute_grads else None
        tensors = store.as_tensors(tape)
        v = ad.constant(v_value)
        window_loss = None
        for jj in range(j, stop):
            xi, eta = _training_noise(noise_rng.child(jj), batch, n, system)
            v = mnmef_step(
                v, observations[:, jj], system, tensors, mnmef_config, xi, eta, table=table
            )
            diff = ad.sub(ad.mean_axis(v, axis=1), ad.constant(truths[:, jj + 1]))
            per_traj = ad.sum_axis(ad.mul(diff, diff), axis=1)
            term = ad.sum_axis(ad.mul(per_traj, ad.constant(weights[:, jj])), axis=0)
            window_loss = term if window_loss is None else ad.add(window_loss, term)
        total += float(window_loss.value)
        if compute_grads:
            tape.backward(window_loss)
            for name, key, _ in store.trainable_arrays():
                grads[(name, key)] += tape.grad(tensors[name][key])
        v_value = v.value
        j = stop
    return total, grads


# ---------------------------------------------------------------------------
# optimizer


class OptimizerState:
    """First/second-moment accumulators for every unfrozen parameter."""

    def __init__(self, store: ParamStore, weight_decay: float = 0.0):
        self.m = {(name, key): np.zeros_like(arr) for name, key, arr in store.trainable_arrays()}
        self.v = {key: np.zeros_like(val) for key, val in self.m.items()}
        self.step_count = 0
        self.weight_decay = float(weight_decay)


def adamw_step(
    state: OptimizerState,
    store: ParamStore,
    grads: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place on the store.

    Weight decay multiplies parameters directly (never the moments); frozen
    partitions are skipped entirely because they have no optimizer slots.
    """
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, key, param in store.trainable_arrays():
        g = grads[(name, key)]
        if g.shape != param.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name}.{key} shape {param.shape}"
            )
        m = state.m[(name, key)]
        v = state.v[(name, key)]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if state.weight_decay:
            param -= lr * state.weight_decay * param
        param -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


# ---------------------------------------------------------------------------
# training loops


def _stack_data(data, n_trajectories: int, n_steps: int):
    """Materialize (truths, observations) arrays from a store or run list."""
    if len(data) < n_trajectories:
        raise ValueError(f"need {n_trajectories} trajectories, store has {len(data)}")
    runs = [data[i] for i in range(n_trajectories)]
    for run in runs:
        if run.n_steps < n_steps:
            raise ValueError(f"trajectory has {run.n_steps} steps, need {n_steps}")
    truths = np.stack([run.states[: n_steps + 1] for run in runs])
    observations = np.stack([run.observations[:n_steps] for run in runs])
    return truths, observations


def _train_loop(
    store: ParamStore,
    mnmef_config: MnmefConfig,
    system,
    table: DistanceTable | None,
    truths: np.ndarray,
    observations: np.ndarray,
    config: TrainConfig,
    epochs: int,
    lr: float,
    rng_root: RngStream,
    checkpoint_dir=None,
    label: str = "train",
    epoch_callback=None,
) -> list[EpochRecord]:
    m_traj = truths.shape[0]
    n = config.n_members
    optimizer = OptimizerState(store, weight_decay=config.weight_decay)
    history: list[EpochRecord] = []
    start = time.monotonic()
    for epoch in range(epochs):
        rng_epoch = rng_root.child(epoch)
        order = rng_epoch.child(0).permutation(m_traj)
        epoch_loss = 0.0
        for batch_index, lo in enumerate(range(0, m_traj, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            rng_batch = rng_epoch.child(1 + batch_index)
            v0 = truths[idx, 0][:, None, :] + rng_batch.child(0).standard_normal(
                (idx.size, n, system.d_v)
            )
            loss, grads = batch_loss_and_grads(
                store, mnmef_config, system, table,
                truths[idx], observations[idx], v0,
                rng_batch.child(1), config.j0, normalized=config.loss_normalized,
            )
            if not np.isfinite(loss):
                raise TrainingDivergence(
                    f"{label}: non-finite loss at epoch {epoch}, batch {batch_index}"
                )
            adamw_step(optimizer, store, grads, lr)
            epoch_loss += loss * idx.size
        history.append(EpochRecord(epoch, epoch_loss / m_traj, time.monotonic() - start))
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir / f"{label}_epoch{epoch:04d}.mnm", store, mnmef_config)
        if epoch_callback is not None:
            epoch_callback(epoch, store)
    return history


def pretrain(
    config: TrainConfig,
    system,
    data,
    checkpoint_dir=None,
    epoch_callback=None,
    mnmef_overrides: dict | None = None,
) -> tuple[ParamStore, MnmefConfig, DistanceTable | None, list[EpochRecord]]:
    """Train all partitions from scratch on ``data`` (a trajectory store or a
    list of truth runs).  Each trajectory re-initializes its ensemble around
    the true initial state with identity covariance, fresh every epoch."""
    mnmef_config = MnmefConfig.for_system(
        system, config.n_members, j0=config.j0, **(mnmef_overrides or {})
    )
    table = (
        DistanceTable(system.d_v, system.obs_indices) if mnmef_config.use_localization else None
    )
    store = ParamStore.init(RngStream(config.seed).child(0), mnmef_config, table)
    truths, observations = _stack_data(data, config.n_trajectories, config.n_steps)
    history = _train_loop(
        store, mnmef_config, system, table, truths, observations,
        config, config.epochs, config.learning_rate,
        RngStream(config.seed).child(1), checkpoint_dir, label="pretrain",
        epoch_callback=epoch_callback,
    )
    return store, mnmef_config, table, history


def finetune_config(config: TrainConfig, n_prime: int) -> TrainConfig:
    """Fine-tuning budget: half the trajectories, a tenth the learning rate,
    the fine-tune epoch count, at the new ensemble size."""
    return replace(
        config,
        n_members=int(n_prime),
        n_trajectories=max(1, config.n_trajectories // 2),
        learning_rate=config.learning_rate / 10.0,
        epochs=config.finetune_epochs,
    )


def finetune(
    pretrained: ParamStore,
    n_prime: int,
    config: TrainConfig,
    system,
    data,
    checkpoint_dir=None,
    mnmef_overrides: dict | None = None,
) -> tuple[ParamStore, MnmefConfig, DistanceTable | None, list[EpochRecord]]:
    """Adapt a pretrained model to ensemble size ``n_prime``.

    The encoder partition is frozen (bitwise); only the gain, inflation, and
    localization heads move.  ``config`` is the pretraining configuration;
    the derived budget comes from :func:`finetune_config`.
    """
    ft_config = finetune_config(config, n_prime)
    mnmef_config = MnmefConfig.for_system(
        system, ft_config.n_members, j0=ft_config.j0, **(mnmef_overrides or {})
    )
    table = (
        DistanceTable(system.d_v, system.obs_indices) if mnmef_config.use_localization else None
    )
    store = pretrained.copy()
    store.freeze("st")
    truths, observations = _stack_data(data, ft_config.n_trajectories, ft_config.n_steps)
    history = _train_loop(
        store, mnmef_config, system, table, truths, observations,
        ft_config, ft_config.epochs, ft_config.learning_rate,
        RngStream(ft_config.seed).child(2), checkpoint_dir, label="finetune",
    )
    return store, mnmef_config, table, history


def write_training_log(path, history: list[EpochRecord]) -> None:
    """CSV with one row per epoch: epoch, train_loss, wall_time_s."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "wall_time_s"])
        for record in history:
            writer.writerow([record.epoch, repr(record.loss), f"{record.wall_time:.3f}"])
