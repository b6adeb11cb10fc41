"""Input-validation helpers shared by the estimator layer and the CLI."""

from __future__ import annotations

import numpy as np

__all__ = ["check_array", "check_ensemble", "check_spd_shape"]


def check_array(a, *, name: str = "array", ndim: int | None = None, shape=None, finite: bool = True) -> np.ndarray:
    """Coerce to a float64 array and validate rank/shape/finiteness.

    ``shape`` entries set to ``None`` are unconstrained, e.g.
    ``shape=(None, 3)`` accepts any row count with exactly 3 columns.
    """
    out = np.asarray(a, dtype=np.float64)
    if ndim is not None and out.ndim != ndim:
        raise ValueError(f"{name} must have ndim={ndim}, got ndim={out.ndim} (shape {out.shape})")
    if shape is not None:
        if out.ndim != len(shape):
            raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
        for want, got in zip(shape, out.shape):
            if want is not None and want != got:
                raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    if finite and not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


def check_ensemble(members, d_v: int | None = None, *, name: str = "ensemble") -> np.ndarray:
    """Validate an ``(N, d_v)`` member matrix with at least two members."""
    out = check_array(members, name=name, ndim=2)
    if out.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 members, got {out.shape[0]}")
    if d_v is not None and out.shape[1] != d_v:
        raise ValueError(f"{name} has state dimension {out.shape[1]}, expected {d_v}")
    return out


def check_spd_shape(a, n: int | None = None, *, name: str = "matrix") -> np.ndarray:
    """Validate a square symmetric matrix (symmetry to 1e-8 absolute)."""
    out = check_array(a, name=name, ndim=2)
    if out.shape[0] != out.shape[1]:
        raise ValueError(f"{name} must be square, got {out.shape}")
    if n is not None and out.shape[0] != n:
        raise ValueError(f"{name} must be {n}x{n}, got {out.shape}")
    if not np.allclose(out, out.T, atol=1e-8):
        raise ValueError(f"{name} must be symmetric")
    return out
