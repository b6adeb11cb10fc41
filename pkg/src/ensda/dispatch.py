"""Array-or-tensor dispatch helpers.

The dynamical-system steppers are written once against ``+ - * @`` plus the
helpers below, so the same code integrates plain float64 numpy arrays (truth
generation, classical filters) and autodiff tensors (training through the
dynamics). Both paths execute the same numpy kernels in the same order, so
their values agree bitwise.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = ["take", "cat", "is_tensor", "asarray"]


def is_tensor(x) -> bool:
    return isinstance(x, ad.Tensor)


def asarray(x) -> np.ndarray:
    """Underlying numpy value of either an array or a tensor."""
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def take(x, indices, axis: int = -1):
    """Index-select along an axis for arrays and tensors alike."""
    if isinstance(x, ad.Tensor):
        return ad.gather(x, indices, axis=axis)
    return np.take(x, indices, axis=axis)


def cat(parts, axis: int = -1):
    """Concatenate arrays or tensors along an axis."""
    if any(isinstance(p, ad.Tensor) for p in parts):
        return ad.concat(parts, axis=axis)
    return np.concatenate(parts, axis=axis)
