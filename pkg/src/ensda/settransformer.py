"""Permutation-invariant ensemble encoder.

Maps a set of (state, predicted-observation) pairs to a fixed 64-dimensional
summary vector.  The architecture is a set transformer: an input perceptron,
two self-attention blocks, attention pooling against a trainable 16x64 seed,
two more self-attention blocks, flattening, and an output perceptron.

Attention here scores raw inner products (no 1/sqrt(d_k) scaling) and uses no
projection biases; each of the 8 heads works in an 8-dimensional subspace and
the concatenated heads pass through a square output projection.  Every block
wraps its sublayers in residual connections and trainable layer norms.

All forward functions accept tensors from :mod:`ensda.autodiff` (or plain
arrays, which are treated as constants) so one code path serves inference and
gradient-based training.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .numerics import RngStream

__all__ = [
    "HEADS",
    "LATENT",
    "HEAD_DIM",
    "SEED_LEN",
    "D_ST",
    "init_set_transformer",
    "attention",
    "feedforward",
    "cab",
    "encode_ensemble",
    "count_params",
]

HEADS = 8
LATENT = 64
HEAD_DIM = LATENT // HEADS
SEED_LEN = 16
D_ST = 64
_CAT_DIM = SEED_LEN * LATENT


# ---------------------------------------------------------------------------
# initialization


def _kaiming_uniform(rng: RngStream, shape: tuple[int, int]) -> np.ndarray:
    bound = float(np.sqrt(6.0 / shape[1]))
    return rng.uniform(-bound, bound, shape)


def _init_attention(rng: RngStream, out: dict, prefix: str, d_u: int, d_w: int) -> None:
    out[f"{prefix}.q"] = _kaiming_uniform(rng, (HEADS * HEAD_DIM, d_u))
    out[f"{prefix}.k"] = _kaiming_uniform(rng, (HEADS * HEAD_DIM, d_w))
    out[f"{prefix}.v"] = _kaiming_uniform(rng, (HEADS * HEAD_DIM, d_w))
    out[f"{prefix}.o"] = _kaiming_uniform(rng, (LATENT, HEADS * HEAD_DIM))


def _init_feedforward(rng: RngStream, out: dict, prefix: str, d_in: int, d_hidden: int, d_out: int) -> None:
    out[f"{prefix}.w1"] = _kaiming_uniform(rng, (d_hidden, d_in))
    out[f"{prefix}.b1"] = np.zeros(d_hidden)
    out[f"{prefix}.w2"] = _kaiming_uniform(rng, (d_out, d_hidden))
    out[f"{prefix}.b2"] = np.zeros(d_out)


def _init_cab(rng: RngStream, out: dict, prefix: str, d_u: int, d_w: int) -> None:
    _init_attention(rng, out, f"{prefix}.att", d_u, d_w)
    _init_feedforward(rng, out, f"{prefix}.ffn", d_u, d_u, d_u)
    out[f"{prefix}.ln1.gamma"] = np.ones(d_u)
    out[f"{prefix}.ln1.beta"] = np.zeros(d_u)
    out[f"{prefix}.ln2.gamma"] = np.ones(d_u)
    out[f"{prefix}.ln2.beta"] = np.zeros(d_u)


def init_set_transformer(rng: RngStream, d_in: int) -> dict[str, np.ndarray]:
    """Fresh encoder parameters for inputs of per-member width ``d_in``.

    Weight matrices are Kaiming-uniform, biases zero, layer norms identity,
    and the pooling seed is 0.1 x standard normal.
    """
    params: dict[str, np.ndarray] = {}
    _init_feedforward(rng, params, "nn_in", d_in, LATENT, LATENT)
    _init_cab(rng, params, "sab1", LATENT, LATENT)
    _init_cab(rng, params, "sab2", LATENT, LATENT)
    _init_cab(rng, params, "pma", LATENT, LATENT)
    params["pma.seed"] = 0.1 * rng.standard_normal((SEED_LEN, LATENT))
    _init_cab(rng, params, "sab3", LATENT, LATENT)
    _init_cab(rng, params, "sab4", LATENT, LATENT)
    _init_feedforward(rng, params, "nn_out", _CAT_DIM, LATENT, D_ST)
    return params


def count_params(params: dict) -> int:
    return int(sum(np.asarray(getattr(v, "value", v)).size for v in params.values()))


# ---------------------------------------------------------------------------
# forward


def attention(u, w, p: dict, prefix: str):
    """Multihead attention of sequence ``u`` over sequence ``w``.

    ``u``: (..., N, d_u), ``w``: (..., M, d_w) -> (..., N, LATENT).
    """
    q_all = ad.matmul(u, ad.transpose(p[f"{prefix}.q"]))
    k_all = ad.matmul(w, ad.transpose(p[f"{prefix}.k"]))
    v_all = ad.matmul(w, ad.transpose(p[f"{prefix}.v"]))
    heads = []
    for r in range(HEADS):
        lo, hi = r * HEAD_DIM, (r + 1) * HEAD_DIM
        q = ad.slice_axis(q_all, -1, lo, hi)
        k = ad.slice_axis(k_all, -1, lo, hi)
        v = ad.slice_axis(v_all, -1, lo, hi)
        weights = ad.softmax_axis(ad.matmul(q, ad.transpose(k)), axis=-1)
        heads.append(ad.matmul(weights, v))
    return ad.matmul(ad.concat(heads, axis=-1), ad.transpose(p[f"{prefix}.o"]))


def feedforward(x, p: dict, prefix: str):
    """Two affine layers with a ReLU between: W2 relu(W1 x + b1) + b2."""
    hidden = ad.relu(ad.add(ad.matmul(x, ad.transpose(p[f"{prefix}.w1"])), p[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, ad.transpose(p[f"{prefix}.w2"])), p[f"{prefix}.b2"])


def cab(u, w, p: dict, prefix: str):
    """Cross-attention block: residual attention then residual feedforward,
    each followed by a trainable layer norm.  ``cab(u, u, ...)`` is a
    self-attention block; ``cab(seed, u, ...)`` pools to a fixed length."""
    u1 = ad.layer_norm_affine(
        ad.add(u, attention(u, w, p, f"{prefix}.att")),
        p[f"{prefix}.ln2.gamma"],
        p[f"{prefix}.ln2.beta"],
    )
    return ad.layer_norm_affine(
        ad.add(u1, feedforward(u1, p, f"{prefix}.ffn")),
        p[f"{prefix}.ln1.gamma"],
        p[f"{prefix}.ln1.beta"],
    )


def encode_ensemble(pairs, p: dict):
    """Encode a member set into a 64-vector summary.

    ``pairs``: (N, d_in) or batched (B, N, d_in); rows may be permuted freely
    without changing the output.  Returns a Tensor of shape (64,) or (B, 64).
    """
    ndim = pairs.ndim if hasattr(pairs, "ndim") else np.asarray(pairs).ndim
    x = pairs
    single = ndim == 2
    if single:
        n = x.shape[0]
        x = ad.reshape(x, (1, n, x.shape[1]))
    x = feedforward(x, p, "nn_in")
    x = cab(x, x, p, "sab1")
    x = cab(x, x, p, "sab2")
    x = cab(p["pma.seed"], x, p, "pma")
    x = cab(x, x, p, "sab3")
    x = cab(x, x, p, "sab4")
    x = ad.reshape(x, (x.shape[0], _CAT_DIM))
    f_v = feedforward(x, p, "nn_out")
    if single:
        f_v = ad.reshape(f_v, (D_ST,))
    return f_v
