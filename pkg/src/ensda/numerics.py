"""Shared dense linear algebra and deterministic random-number streams.

All numerical state in this package is float64. Ensembles and matrices are
plain C-order numpy arrays; this module provides the few linear-algebra
kernels the filters rely on (SPD solves, symmetric square roots, Gaussian
sampling) plus a counter-based random stream type whose draws depend only on
``(seed, stream_id)`` and the draw order, never on scheduling.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Matrix",
    "NotSPDError",
    "RngStream",
    "cholesky_spd",
    "solve_spd",
    "sym_sqrt",
    "sample_gaussian",
]

# Dense float64 array. Kept as a plain alias: every consumer works on raw
# numpy arrays and relies on shape conventions documented per function.
Matrix = np.ndarray


class NotSPDError(np.linalg.LinAlgError):
    """Raised when a matrix required to be symmetric positive definite is not."""


def cholesky_spd(a: Matrix) -> Matrix:
    """Lower Cholesky factor of an SPD matrix (supports stacked batches).

    Raises :class:`NotSPDError` if any factorization hits a non-positive
    pivot. Symmetry is the caller's responsibility; only positivity is
    detected here.
    """
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(f"matrix is not positive definite: {exc}") from exc


def solve_spd(a: Matrix, b: Matrix) -> Matrix:
    """Solve ``a @ x = b`` for SPD ``a`` via Cholesky factorization.

    Accepts stacked batches ``a: (..., n, n)``, ``b: (..., n, m)`` or a single
    right-hand-side vector ``b: (n,)``. The same triangular-solve sequence is
    used by every caller in the package so that algebraically identical code
    paths produce bitwise identical results.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lower = cholesky_spd(a)
    vector_rhs = b.ndim == a.ndim - 1
    if vector_rhs:
        b = b[..., None]
    z = np.linalg.solve(lower, b)
    x = np.linalg.solve(np.swapaxes(lower, -1, -2), z)
    return x[..., 0] if vector_rhs else x


def sym_sqrt(a: Matrix) -> Matrix:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below zero (roundoff on a nominally PSD input) are clamped to
    zero, so the result is always real symmetric PSD with
    ``sym_sqrt(a) @ sym_sqrt(a) ~= a`` for PSD ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    vals, vecs = np.linalg.eigh(a)
    vals = np.clip(vals, 0.0, None)
    root = (vecs * np.sqrt(vals)[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    return root


class RngStream:
    """Deterministic random stream identified by ``(seed, path)``.

    Streams form a tree: a root is ``RngStream(seed, stream_id)`` with path
    ``(stream_id,)``, and ``child(i)`` appends ``i`` to the path.  The
    ``(seed, path)`` pair is hashed into a Philox key through numpy's
    ``SeedSequence`` spawn-key mechanism, so equal paths replay identical
    draw sequences while distinct paths — including a parent and any of its
    descendants, and same-numbered children of different parents — give
    statistically independent streams.  Reproducibility does not depend on
    thread or process scheduling.  A stream is single-owner: share the seed
    and path, not the object.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, stream_id: int = 0, *, _path: tuple | None = None):
        self.seed = int(seed)
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.path = (int(stream_id),) if _path is None else _path
        if any(p < 0 for p in self.path):
            raise ValueError(f"stream ids must be non-negative, got path {self.path}")
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(key=sequence.generate_state(2, np.uint64)))

    @property
    def stream_id(self) -> int:
        return self.path[-1]

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"RngStream(seed={self.seed}, path={self.path})"

    def child(self, stream_id: int) -> "RngStream":
        """Fresh stream one level down the tree, independent of every other path."""
        return RngStream(self.seed, _path=self.path + (int(stream_id),))

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in ``[low, high]`` (both endpoints included)."""
        return self._gen.integers(low, high, size=shape, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def sample_gaussian(rng: RngStream, mean: np.ndarray, cov_factor: Matrix, n: int | None = None) -> np.ndarray:
    """Draw from N(mean, cov_factor @ cov_factor.T).

    ``mean`` has shape ``(d,)`` and ``cov_factor`` shape ``(d, k)``. With
    ``n=None`` a single ``(d,)`` sample is returned, otherwise ``(n, d)`` with
    rows drawn independently. Draws consume ``k`` (or ``n * k``) standard
    normals from ``rng`` in a fixed order.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov_factor = np.asarray(cov_factor, dtype=np.float64)
    d, k = cov_factor.shape
    if mean.shape != (d,):
        raise ValueError(f"mean shape {mean.shape} does not match cov_factor rows {d}")
    if n is None:
        z = rng.standard_normal((k,))
        return mean + cov_factor @ z
    z = rng.standard_normal((n, k))
    return mean + z @ cov_factor.T
