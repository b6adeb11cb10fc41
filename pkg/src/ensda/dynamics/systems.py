"""System registry: state dimension, observation operator, noise levels, stepper.

A :class:`SystemSpec` bundles everything a filter or a truth run needs:
``step(v)`` advances states (any batch shape ``(..., d_v)``) by one
assimilation interval ``dt`` (internally substepped), ``observe(v)``
subsamples the observed coordinates, and ``sigma_v`` / ``sigma_y`` set the
additive process/observation noise standard deviations. Process noise is
added once per assimilation interval, not per substep.

Observation operators subsample coordinates ``offset, offset+stride, ...``
(0-based). Defaults: every 4th coordinate of 40 for the cyclic advection
system, every 8th of 128 for Kuramoto-Sivashinsky, coordinate x only for the
three-variable convection system, every other coordinate for the linear
benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..dispatch import take
from ..numerics import RngStream
from .ks import KSStepper
from .odes import lorenz63_rhs, lorenz96_rhs, rk4_steps

__all__ = ["SystemSpec", "lorenz63", "lorenz96", "kuramoto_sivashinsky", "linear_rotation", "make_system", "SYSTEM_NAMES"]


@dataclass(frozen=True)
class SystemSpec:
    """Immutable description of a filtering test system."""

    name: str
    d_v: int
    d_y: int
    dt: float
    sigma_v: float
    sigma_y: float
    obs_offset: int
    obs_stride: int
    clamp: float | None
    needs_burn_in: bool
    step_fn: Callable = field(repr=False)
    base_state_fn: Callable = field(repr=False)
    params: dict = field(default_factory=dict)

    @property
    def obs_indices(self) -> np.ndarray:
        return np.arange(self.obs_offset, self.obs_offset + self.obs_stride * self.d_y, self.obs_stride)

    def step(self, v):
        """Advance ``(..., d_v)`` states by one interval ``dt`` (no noise)."""
        return self.step_fn(v)

    def observe(self, v):
        """Noise-free observation: subsample the observed coordinates."""
        return take(v, self.obs_indices, axis=-1)

    def base_state(self, rng: RngStream) -> np.ndarray:
        """Starting state for the burn-in (or the initial state directly)."""
        return self.base_state_fn(rng)

    def gamma(self) -> np.ndarray:
        """Observation noise covariance (diagonal)."""
        return (self.sigma_y**2) * np.eye(self.d_y)

    def with_noise(self, sigma_v: float | None = None, sigma_y: float | None = None) -> "SystemSpec":
        """Copy with overridden noise levels."""
        from dataclasses import replace

        kwargs = {}
        if sigma_v is not None:
            kwargs["sigma_v"] = float(sigma_v)
        if sigma_y is not None:
            kwargs["sigma_y"] = float(sigma_y)
        return replace(self, **kwargs)


def lorenz63(sigma_v: float = 1e-3, sigma_y: float = 1.0) -> SystemSpec:
    """Three-variable convection system, observing x only."""
    dt, n_substeps = 0.15, 5

    def step(v):
        return rk4_steps(lorenz63_rhs, v, dt, n_substeps)

    def base_state(rng: RngStream):
        return rng.standard_normal((3,))

    return SystemSpec(
        name="lorenz63",
        d_v=3,
        d_y=1,
        dt=dt,
        sigma_v=sigma_v,
        sigma_y=sigma_y,
        obs_offset=0,
        obs_stride=1,
        clamp=60.0,
        needs_burn_in=True,
        step_fn=step,
        base_state_fn=base_state,
        params={"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0, "n_substeps": n_substeps},
    )


def lorenz96(d: int = 40, forcing: float = 8.0, sigma_v: float = 1e-3, sigma_y: float = 1.0) -> SystemSpec:
    """Cyclic advection-forcing system, observing every 4th coordinate."""
    dt, n_substeps = 0.15, 5

    def step(v):
        return rk4_steps(lambda u: lorenz96_rhs(u, forcing), v, dt, n_substeps)

    def base_state(rng: RngStream):
        return 5.0 + rng.standard_normal((d,))

    return SystemSpec(
        name="lorenz96",
        d_v=d,
        d_y=d // 4,
        dt=dt,
        sigma_v=sigma_v,
        sigma_y=sigma_y,
        obs_offset=0,
        obs_stride=4,
        clamp=20.0,
        needs_burn_in=True,
        step_fn=step,
        base_state_fn=base_state,
        params={"forcing": forcing, "n_substeps": n_substeps},
    )


def kuramoto_sivashinsky(d: int = 128, sigma_v: float = 1e-3, sigma_y: float = 1.0) -> SystemSpec:
    """Fourth-order stiff PDE on a periodic domain, observing every 8th point."""
    domain = 32.0 * np.pi
    dt = 1.0
    stepper = KSStepper(d=d, domain_size=domain, substep=0.25)

    def step(v):
        return stepper.step(v, dt)

    def base_state(rng: RngStream):
        # Deterministic smooth seed field; the random burn-in length carries
        # the randomness onto the attractor.
        x = stepper.grid()
        return np.cos(2.0 * np.pi * x / domain) * (1.0 + np.sin(2.0 * np.pi * x / domain))

    return SystemSpec(
        name="ks",
        d_v=d,
        d_y=d // 8,
        dt=dt,
        sigma_v=sigma_v,
        sigma_y=sigma_y,
        obs_offset=0,
        obs_stride=8,
        clamp=10.0,
        needs_burn_in=True,
        step_fn=step,
        base_state_fn=base_state,
        params={"domain_size": domain, "substep": 0.25},
    )


ROTATION_ANGLES = (0.3, 0.7, 1.1, 1.5, 1.9)


def rotation_matrix(angles=ROTATION_ANGLES) -> np.ndarray:
    """Block-diagonal orthogonal map of 2x2 rotations (all |eigenvalues| = 1)."""
    d = 2 * len(angles)
    a = np.zeros((d, d))
    for i, theta in enumerate(angles):
        c, s = np.cos(theta), np.sin(theta)
        a[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = [[c, -s], [s, c]]
    return a


def linear_rotation(sigma_v: float = 0.01, sigma_y: float = 1.0) -> SystemSpec:
    """Marginally stable linear benchmark, observing every other coordinate."""
    a = rotation_matrix()
    a_t = a.T.copy()
    d = a.shape[0]

    def step(v):
        return v @ a_t

    def base_state(rng: RngStream):
        return rng.standard_normal((d,))

    return SystemSpec(
        name="linear",
        d_v=d,
        d_y=d // 2,
        dt=1.0,
        sigma_v=sigma_v,
        sigma_y=sigma_y,
        obs_offset=0,
        obs_stride=2,
        clamp=None,
        needs_burn_in=False,
        step_fn=step,
        base_state_fn=base_state,
        params={"angles": list(ROTATION_ANGLES)},
    )


_FACTORIES = {
    "lorenz63": lorenz63,
    "lorenz96": lorenz96,
    "ks": kuramoto_sivashinsky,
    "linear": linear_rotation,
}

SYSTEM_NAMES = tuple(_FACTORIES)


def make_system(name: str, sigma_v: float | None = None, sigma_y: float | None = None) -> SystemSpec:
    """Build a system by name with optional noise overrides."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(_FACTORIES)}") from None
    kwargs = {}
    if sigma_v is not None:
        kwargs["sigma_v"] = float(sigma_v)
    if sigma_y is not None:
        kwargs["sigma_y"] = float(sigma_y)
    return factory(**kwargs)
