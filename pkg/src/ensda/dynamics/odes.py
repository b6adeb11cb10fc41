"""Chaotic ODE right-hand sides and the classical RK4 integrator.

State layout is ``(..., d)`` — any number of leading batch axes (ensemble
members, trajectories) is supported. Everything here runs on plain numpy
arrays or autodiff tensors; see :mod:`ensda.dispatch`.
"""

from __future__ import annotations

import numpy as np

from ..dispatch import cat, take

__all__ = ["lorenz63_rhs", "lorenz96_rhs", "rk4_step", "rk4_steps"]


def lorenz63_rhs(v, sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0):
    """Classic three-variable convection system; ``v`` has shape ``(..., 3)``."""
    x = take(v, [0], axis=-1)
    y = take(v, [1], axis=-1)
    z = take(v, [2], axis=-1)
    dx = (y - x) * sigma
    dy = x * rho - x * z - y
    dz = x * y - z * beta
    return cat([dx, dy, dz], axis=-1)


def lorenz96_rhs(v, forcing: float = 8.0):
    """Cyclic advection-forcing system; ``v`` has shape ``(..., d)`` with d >= 4.

    Coordinate i evolves as ``(v[i+1] - v[i-2]) * v[i-1] - v[i] + forcing``
    with indices modulo d.
    """
    d = v.shape[-1]
    idx = np.arange(d)
    v_p1 = take(v, (idx + 1) % d, axis=-1)
    v_m1 = take(v, (idx - 1) % d, axis=-1)
    v_m2 = take(v, (idx - 2) % d, axis=-1)
    return (v_p1 - v_m2) * v_m1 - v + forcing


def rk4_step(rhs, v, dt: float):
    """One classical fourth-order Runge-Kutta step of size ``dt``."""
    k1 = rhs(v)
    k2 = rhs(v + k1 * (0.5 * dt))
    k3 = rhs(v + k2 * (0.5 * dt))
    k4 = rhs(v + k3 * dt)
    return v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)


def rk4_steps(rhs, v, dt: float, n_substeps: int):
    """Advance by ``dt`` using ``n_substeps`` equal RK4 substeps."""
    h = dt / n_substeps
    for _ in range(n_substeps):
        v = rk4_step(rhs, v, h)
    return v
