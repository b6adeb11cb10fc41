"""Truth-trajectory generation: burn-in to the attractor, then noisy evolution.

Each trajectory owns one :class:`~ensda.numerics.RngStream`; its draws happen
in a fixed order (base state, burn-in length, then per step a process-noise
and an observation-noise block), so a trajectory is reproducible from
``(seed, stream_id)`` alone, whether generated singly or in a batch.

Burn-in integrates the deterministic dynamics from the system's base state
for a random number of steps drawn uniformly from [1e3, 5e5] (a fixed length
may be supplied instead to bound runtime for desk-scale work). Afterwards the
truth evolves as ``v[j+1] = step(v[j]) + sigma_v * xi`` with observations
``y[j+1] = observe(v[j+1]) + sigma_y * eta``; the standard-normal blocks are
drawn (and scaled) even when a sigma is zero so the draw schedule never
depends on noise levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import RngStream
from .systems import SystemSpec

__all__ = ["TruthRun", "generate_truth", "generate_truth_batch", "BURN_IN_MIN", "BURN_IN_MAX"]

BURN_IN_MIN = 1_000
BURN_IN_MAX = 500_000


@dataclass
class TruthRun:
    """One reference trajectory plus the observations shown to the filters.

    ``states`` has shape ``(n_steps + 1, d_v)``; ``observations`` has shape
    ``(n_steps, d_y)`` and ``observations[j]`` belongs to ``states[j + 1]``.
    """

    system: str
    seed: int
    stream_id: int
    dt: float
    burn_in_steps: int
    states: np.ndarray
    observations: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.observations.shape[0]


def generate_truth(
    system: SystemSpec, n_steps: int, rng: RngStream, burn_in: int | None = None
) -> TruthRun:
    """Generate a single truth run using (and consuming) ``rng``."""
    return _generate(system, n_steps, [rng], burn_in)[0]


def generate_truth_batch(
    system: SystemSpec,
    n_steps: int,
    seed: int,
    stream_ids,
    burn_in: int | None = None,
) -> list[TruthRun]:
    """Generate several truth runs at once (vectorized over trajectories).

    Equivalent trajectory-by-trajectory to :func:`generate_truth` with
    ``RngStream(seed, stream_id)``.
    """
    streams = [RngStream(seed, int(i)) for i in stream_ids]
    return _generate(system, n_steps, streams, burn_in)


def _generate(system: SystemSpec, n_steps: int, streams, burn_in) -> list[TruthRun]:
    m = len(streams)
    base = np.stack([system.base_state(s) for s in streams])
    if system.needs_burn_in:
        if burn_in is None:
            lengths = np.array([int(s.integers(BURN_IN_MIN, BURN_IN_MAX)) for s in streams])
        else:
            lengths = np.full(m, int(burn_in))
    else:
        lengths = np.zeros(m, dtype=int)

    start = np.array(base, dtype=np.float64)
    if lengths.max() > 0:
        current = base
        done = 0
        for target in np.unique(lengths):
            for _ in range(int(target) - done):
                current = system.step(current)
            done = int(target)
            hit = lengths == target
            start[hit] = current[hit]

    d_v, d_y = system.d_v, system.d_y
    states = np.empty((m, n_steps + 1, d_v))
    observations = np.empty((m, n_steps, d_y))
    states[:, 0] = start
    v = start
    for j in range(1, n_steps + 1):
        v = system.step(v)
        xi = np.stack([s.standard_normal((d_v,)) for s in streams])
        v = v + system.sigma_v * xi
        states[:, j] = v
        eta = np.stack([s.standard_normal((d_y,)) for s in streams])
        observations[:, j - 1] = system.observe(v) + system.sigma_y * eta

    return [
        TruthRun(
            system=system.name,
            seed=streams[i].seed,
            stream_id=streams[i].stream_id,
            dt=system.dt,
            burn_in_steps=int(lengths[i]),
            states=states[i],
            observations=observations[i],
        )
        for i in range(m)
    ]
