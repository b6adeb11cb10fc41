"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records an append-only list of operations; :class:`Tensor`
wraps a numpy array plus its gradient slot on the tape. Operations applied to
untracked tensors (no tape) skip recording entirely, so the same model code
serves both training (with gradients) and inference (plain numpy speed).

Conventions:

- Everything is float64; values are treated as immutable after creation.
- Operands of :func:`matmul` must be at least 2-D; leading dimensions follow
  numpy broadcasting, and gradients are summed back over broadcast axes.
- ``detach`` returns a value-identical constant tensor, cutting the gradient
  flow; it is the primitive behind truncated backpropagation through time.
"""

from __future__ import annotations

import numpy as np

from .numerics import NotSPDError

__all__ = [
    "Tape",
    "Tensor",
    "constant",
    "detach",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "gather",
    "sum_axis",
    "mean_axis",
    "softmax_axis",
    "exp",
    "log",
    "relu",
    "logistic",
    "layer_norm_affine",
    "batched_solve_spd",
    "clamp",
]


class Tape:
    """Append-only operation record with per-tensor gradient slots."""

    __slots__ = ("_nodes", "_n_slots", "_grads")

    def __init__(self):
        self._nodes: list[tuple[int, object]] = []
        self._n_slots = 0
        self._grads: list[np.ndarray | None] | None = None

    def _alloc(self) -> int:
        slot = self._n_slots
        self._n_slots += 1
        return slot

    def _record(self, out_slot: int, backward) -> None:
        self._nodes.append((out_slot, backward))

    def leaf(self, value) -> "Tensor":
        """Register an input tensor whose gradient will be available."""
        arr = np.asarray(value, dtype=np.float64)
        return Tensor(arr, self, self._alloc())

    def accumulate(self, slot: int, grad: np.ndarray) -> None:
        assert self._grads is not None, "accumulate called outside backward()"
        held = self._grads[slot]
        self._grads[slot] = grad if held is None else held + grad

    def backward(self, output: "Tensor", seed: np.ndarray | None = None) -> None:
        """Propagate gradients from ``output`` back to every recorded tensor.

        ``seed`` defaults to ones (for a scalar output this is d(output)/d(output)).
        Gradients are then available through :meth:`grad`.
        """
        if output.tape is not self:
            raise ValueError("output tensor does not belong to this tape")
        self._grads = [None] * self._n_slots
        self._grads[output.slot] = (
            np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
        )
        for out_slot, backward_fn in reversed(self._nodes):
            g = self._grads[out_slot]
            if g is not None:
                backward_fn(g)

    def grad(self, tensor: "Tensor") -> np.ndarray:
        """Gradient of the last ``backward`` output w.r.t. ``tensor``."""
        if self._grads is None:
            raise RuntimeError("backward() has not been run on this tape")
        if tensor.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        g = self._grads[tensor.slot]
        return np.zeros_like(tensor.value) if g is None else g


class Tensor:
    """Float64 array tracked (or not) on a tape. ``slot == -1`` means constant."""

    __slots__ = ("value", "tape", "slot")

    # Make numpy defer binary ops to the Tensor reflected methods instead of
    # broadcasting elementwise over a Tensor object.
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: Tape | None = None, slot: int = -1):
        self.value = value
        self.tape = tape
        self.slot = slot

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        kind = "const" if self.tape is None else f"slot={self.slot}"
        return f"Tensor(shape={self.value.shape}, {kind})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swap_last(self):
        return transpose(self)


def constant(value) -> Tensor:
    """Wrap a value as an untracked tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def detach(t: Tensor) -> Tensor:
    """Value-identical constant: same array, no gradient flow."""
    return Tensor(t.value) if isinstance(t, Tensor) else constant(t)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _result_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _make(value: np.ndarray, tape: Tape | None) -> Tensor:
    if tape is None:
        return Tensor(value)
    return Tensor(value, tape, tape._alloc())


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    tape = _result_tape(a, b)
    out = _make(a.value + b.value, tape)
    if tape is not None:
        a_slot, b_slot = a.slot, b.slot
        a_shape, b_shape = a.value.shape, b.value.shape

        def backward(g, _t=tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, _unbroadcast(g, a_shape))
            if b_slot >= 0:
                _t.accumulate(b_slot, _unbroadcast(g, b_shape))

        tape._record(out.slot, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    tape = _result_tape(a, b)
    out = _make(a.value - b.value, tape)
    if tape is not None:
        a_slot, b_slot = a.slot, b.slot
        a_shape, b_shape = a.value.shape, b.value.shape

        def backward(g, _t=tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, _unbroadcast(g, a_shape))
            if b_slot >= 0:
                _t.accumulate(b_slot, _unbroadcast(-g, b_shape))

        tape._record(out.slot, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    tape = _result_tape(a, b)
    out = _make(a.value * b.value, tape)
    if tape is not None:
        a_slot, b_slot = a.slot, b.slot
        a_val, b_val = a.value, b.value

        def backward(g, _t=tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, _unbroadcast(g * b_val, a_val.shape))
            if b_slot >= 0:
                _t.accumulate(b_slot, _unbroadcast(g * a_val, b_val.shape))

        tape._record(out.slot, backward)
    return out


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    out = _make(a.value * c, a.tape)
    if a.tape is not None:
        a_slot = a.slot

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, g * c)

        a.tape._record(out.slot, backward)
    return out


def neg(a) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    tape = _result_tape(a, b)
    out = _make(np.matmul(a.value, b.value), tape)
    if tape is not None:
        a_slot, b_slot = a.slot, b.slot
        a_val, b_val = a.value, b.value

        def backward(g, _t=tape):
            if a_slot >= 0:
                ga = np.matmul(g, np.swapaxes(b_val, -1, -2))
                _t.accumulate(a_slot, _unbroadcast(ga, a_val.shape))
            if b_slot >= 0:
                gb = np.matmul(np.swapaxes(a_val, -1, -2), g)
                _t.accumulate(b_slot, _unbroadcast(gb, b_val.shape))

        tape._record(out.slot, backward)
    return out


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _lift(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    out = _make(np.transpose(a.value, axes).copy(), a.tape)
    if a.tape is not None:
        inverse = tuple(np.argsort(axes))
        a_slot = a.slot

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, np.transpose(g, inverse))

        a.tape._record(out.slot, backward)
    return out


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _lift(a)
    out = _make(np.reshape(a.value, shape), a.tape)
    if a.tape is not None:
        orig = a.value.shape
        a_slot = a.slot

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, np.reshape(g, orig))

        a.tape._record(out.slot, backward)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    tape = _result_tape(*ts)
    out = _make(np.concatenate([t.value for t in ts], axis=axis), tape)
    if tape is not None:
        slots = [t.slot for t in ts]
        sizes = [t.value.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def backward(g, _t=tape):
            for slot, start, stop in zip(slots, offsets[:-1], offsets[1:]):
                if slot >= 0:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(start, stop)
                    _t.accumulate(slot, g[tuple(index)])

        tape._record(out.slot, backward)
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _lift(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = _make(a.value[index].copy(), a.tape)
    if a.tape is not None:
        a_slot = a.slot
        shape = a.value.shape

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                full = np.zeros(shape, dtype=np.float64)
                full[index] = g
                _t.accumulate(a_slot, full)

        a.tape._record(out.slot, backward)
    return out


def gather(a, indices, axis: int = -1) -> Tensor:
    """Select ``indices`` along ``axis`` (repeats allowed; grads accumulate)."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = _make(np.take(a.value, idx, axis=axis), a.tape)
    if a.tape is not None:
        a_slot = a.slot
        shape = a.value.shape
        ax = axis % a.ndim

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                full = np.zeros(shape, dtype=np.float64)
                moved = np.moveaxis(g, ax, 0)
                target = np.moveaxis(full, ax, 0)
                np.add.at(target, idx.ravel(), moved.reshape((idx.size,) + moved.shape[idx.ndim:]))
                _t.accumulate(a_slot, full)

        a.tape._record(out.slot, backward)
    return out


# ---------------------------------------------------------------------------
# reductions and nonlinearities
# ---------------------------------------------------------------------------


def _axis_tuple(axis) -> tuple[int, ...]:
    return (axis,) if isinstance(axis, int) else tuple(axis)


def sum_axis(a, axis, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _axis_tuple(axis)
    out = _make(a.value.sum(axis=axes, keepdims=keepdims), a.tape)
    if a.tape is not None:
        a_slot = a.slot
        shape = a.value.shape
        norm_axes = tuple(ax % len(shape) for ax in axes)

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                gg = g
                if not keepdims:
                    gg = np.expand_dims(gg, norm_axes)
                _t.accumulate(a_slot, np.broadcast_to(gg, shape).copy())

        a.tape._record(out.slot, backward)
    return out


def mean_axis(a, axis, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _axis_tuple(axis)
    count = 1
    for ax in axes:
        count *= a.value.shape[ax]
    return scale(sum_axis(a, axes, keepdims=keepdims), 1.0 / count)


def softmax_axis(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = _lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, a.tape)
    if a.tape is not None:
        a_slot = a.slot

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                inner = (g * s).sum(axis=axis, keepdims=True)
                _t.accumulate(a_slot, s * (g - inner))

        a.tape._record(out.slot, backward)
    return out


def exp(a) -> Tensor:
    a = _lift(a)
    e = np.exp(a.value)
    out = _make(e, a.tape)
    if a.tape is not None:
        a_slot = a.slot

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, g * e)

        a.tape._record(out.slot, backward)
    return out


def log(a) -> Tensor:
    a = _lift(a)
    out = _make(np.log(a.value), a.tape)
    if a.tape is not None:
        a_slot = a.slot
        a_val = a.value

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, g / a_val)

        a.tape._record(out.slot, backward)
    return out


def relu(a) -> Tensor:
    a = _lift(a)
    out = _make(np.maximum(a.value, 0.0), a.tape)
    if a.tape is not None:
        a_slot = a.slot
        mask = a.value > 0.0

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, g * mask)

        a.tape._record(out.slot, backward)
    return out


def logistic(a) -> Tensor:
    """Elementwise sigmoid 1 / (1 + exp(-x))."""
    a = _lift(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.value))
    out = _make(s, a.tape)
    if a.tape is not None:
        a_slot = a.slot

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, g * s * (1.0 - s))

        a.tape._record(out.slot, backward)
    return out


def clamp(a, limit: float) -> Tensor:
    """Clip values to ``[-limit, limit]``; clipped entries get zero gradient."""
    a = _lift(a)
    limit = float(limit)
    out = _make(np.clip(a.value, -limit, limit), a.tape)
    if a.tape is not None:
        a_slot = a.slot
        mask = np.abs(a.value) <= limit

        def backward(g, _t=a.tape):
            if a_slot >= 0:
                _t.accumulate(a_slot, g * mask)

        a.tape._record(out.slot, backward)
    return out


def layer_norm_affine(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis (biased variance) then apply gamma/beta.

    ``out = gamma * (a - mean) / sqrt(var + eps) + beta`` with the statistics
    taken over the last axis per row.
    """
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    tape = _result_tape(a, gamma, beta)
    x = a.value
    m = x.mean(axis=-1, keepdims=True)
    xc = x - m
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gamma.value + beta.value, tape)
    if tape is not None:
        a_slot, g_slot, b_slot = a.slot, gamma.slot, beta.slot
        gamma_val = gamma.value

        def backward(g, _t=tape):
            if b_slot >= 0:
                _t.accumulate(b_slot, _unbroadcast(g, gamma_val.shape))
            if g_slot >= 0:
                _t.accumulate(g_slot, _unbroadcast(g * xhat, gamma_val.shape))
            if a_slot >= 0:
                gx = g * gamma_val
                mean_gx = gx.mean(axis=-1, keepdims=True)
                mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
                _t.accumulate(a_slot, inv * (gx - mean_gx - xhat * mean_gx_xhat))

        tape._record(out.slot, backward)
    return out


def batched_solve_spd(a, b) -> Tensor:
    """Solve ``a @ x = b`` for SPD ``a`` (supports stacked batches).

    Forward uses a Cholesky factorization (raising :class:`NotSPDError` when a
    pivot fails); backward solves against the same factor:
    ``grad_b = a^-1 @ g`` and ``grad_a = -sym(grad_b @ x^T)``, the symmetrized
    form being exact because callers construct ``a`` symmetrically.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("batched_solve_spd operands must be at least 2-D")
    tape = _result_tape(a, b)
    try:
        lower = np.linalg.cholesky(a.value)
    except np.linalg.LinAlgError as expr:
        raise NotSPDError(f"matrix is not positive definite: {expr}") from expr
    lower_t = np.swapaxes(lower, -1, -2)
    x = np.linalg.solve(lower_t, np.linalg.solve(lower, b.value))
    out = _make(x, tape)
    if tape is not None:
        a_slot, b_slot = a.slot, b.slot
        a_shape, b_shape = a.value.shape, b.value.shape

        def backward(g, _t=tape):
            gb = np.linalg.solve(lower_t, np.linalg.solve(lower, g))
            if b_slot >= 0:
                _t.accumulate(b_slot, _unbroadcast(gb, b_shape))
            if a_slot >= 0:
                ga = -np.matmul(gb, np.swapaxes(x, -1, -2))
                ga = 0.5 * (ga + np.swapaxes(ga, -1, -2))
                _t.accumulate(a_slot, _unbroadcast(ga, a_shape))

        tape._record(out.slot, backward)
    return out
