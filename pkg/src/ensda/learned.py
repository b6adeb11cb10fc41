"""Learned ensemble analysis step.

One assimilation step proceeds: predict members through the dynamics (plus
process noise), form predicted observations, encode the member set into a
summary vector ``f_v`` (set transformer), then

- a gain head maps each (member, predicted obs, observation, f_v) tuple to
  additive anomaly corrections (w, z),
- the corrected 1/N outer-product covariances build the gain
  ``K = (K1 o L1) (K2 o L2 + Gamma)^{-1}``,
- a localization head maps f_v to per-distance weights in [0, 2] that fill
  the Hadamard masks L1/L2 by distance lookup,
- each member moves by ``K (y - predicted obs)``,
- an inflation head maps (updated member, f_v) to an additive term,
- members are clamped to a per-system magnitude bound.

All head outputs pass through final layers initialized to zero, so a freshly
initialized model reproduces the stochastic EnKF exactly; training moves it
away from that baseline.  Everything runs on autodiff tensors shaped
``(batch, members, dim)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .numerics import RngStream
from .settransformer import D_ST, count_params, encode_ensemble, init_set_transformer

__all__ = [
    "HEAD_HIDDEN",
    "DistanceTable",
    "MnmefConfig",
    "ParamStore",
    "head_mlp",
    "corrections",
    "learned_localization",
    "learned_gain",
    "learned_inflation",
    "mnmef_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

HEAD_HIDDEN = 128

_MAGIC = b"ENSDAMNM"
_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file does not match the expected format."""


# ---------------------------------------------------------------------------
# distance bookkeeping


class DistanceTable:
    """Distinct periodic distances and lookup indices for the L matrices.

    ``values`` lists the distinct pairwise distances on the d_v ring;
    ``l1_index[k, l]`` is the position (into ``values``) of the distance
    between state coordinate k and observed coordinate l, and ``l2_index``
    the same for observed-observed pairs.
    """

    def __init__(self, d_v: int, obs_indices: np.ndarray):
        obs_indices = np.asarray(obs_indices, dtype=int)
        self.d_v = int(d_v)
        self.obs_indices = obs_indices
        coords = np.arange(d_v)
        gaps = np.abs(coords[:, None] - coords[None, :])
        all_dist = np.minimum(gaps, d_v - gaps)
        self.values = np.unique(all_dist).astype(float)
        self.n_distances = self.values.size
        lookup = {v: i for i, v in enumerate(self.values)}
        d1 = np.minimum(
            np.abs(coords[:, None] - obs_indices[None, :]),
            d_v - np.abs(coords[:, None] - obs_indices[None, :]),
        )
        d2 = np.minimum(
            np.abs(obs_indices[:, None] - obs_indices[None, :]),
            d_v - np.abs(obs_indices[:, None] - obs_indices[None, :]),
        )
        self.l1_index = np.vectorize(lookup.__getitem__)(d1.astype(float))
        self.l2_index = np.vectorize(lookup.__getitem__)(d2.astype(float))

    def build_matrices(self, g_hat):
        """Fill (B, d_v, d_y) and (B, d_y, d_y) masks from (B, N_D) weights."""
        b = g_hat.shape[0]
        d_y = self.obs_indices.size
        l1 = ad.reshape(ad.gather(g_hat, self.l1_index.ravel(), axis=-1), (b, self.d_v, d_y))
        l2 = ad.reshape(ad.gather(g_hat, self.l2_index.ravel(), axis=-1), (b, d_y, d_y))
        return l1, l2


# ---------------------------------------------------------------------------
# configuration and parameters


@dataclass(frozen=True)
class MnmefConfig:
    """Architecture/runtime description stored alongside the parameters."""

    system: str
    d_v: int
    d_y: int
    ensemble_size: int
    clamp: float | None
    use_localization: bool
    loc_bounded_mode: str = "logistic2"
    activation: str = "relu"
    j0: int = 5

    def __post_init__(self):
        if self.loc_bounded_mode not in ("logistic2", "softmax2"):
            raise ValueError(f"unknown bounded-layer mode: {self.loc_bounded_mode}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation: {self.activation}")

    @classmethod
    def for_system(cls, system, ensemble_size: int, j0: int = 5, **overrides) -> "MnmefConfig":
        # localization needs a spatial ring; only the two extended systems
        # (cyclic advection, Kuramoto-Sivashinsky) have one
        kwargs = dict(
            system=system.name,
            d_v=system.d_v,
            d_y=system.d_y,
            ensemble_size=int(ensemble_size),
            clamp=system.clamp,
            use_localization=system.name in ("lorenz96", "ks"),
            j0=int(j0),
        )
        kwargs.update(overrides)
        return cls(**kwargs)


def _init_head(rng: RngStream, d_in: int, d_out: int) -> dict[str, np.ndarray]:
    """Three affine layers, ReLU between; the last layer starts at zero so the
    head contributes nothing until trained."""

    def kaiming(shape):
        return rng.uniform(-np.sqrt(6.0 / shape[1]), np.sqrt(6.0 / shape[1]), shape)

    return {
        "w1": kaiming((HEAD_HIDDEN, d_in)),
        "b1": np.zeros(HEAD_HIDDEN),
        "w2": kaiming((HEAD_HIDDEN, HEAD_HIDDEN)),
        "b2": np.zeros(HEAD_HIDDEN),
        "w3": np.zeros((d_out, HEAD_HIDDEN)),
        "b3": np.zeros(d_out),
    }


class ParamStore:
    """Named parameter partitions ("st", "gain", "infl", "loc") with per-
    partition freeze flags.  Fine-tuning freezes exactly "st"."""

    def __init__(self, partitions: dict[str, dict[str, np.ndarray]], frozen=()):
        self.partitions = partitions
        self.frozen = set(frozen)
        unknown = self.frozen - set(partitions)
        if unknown:
            raise ValueError(f"cannot freeze unknown partitions: {sorted(unknown)}")

    @classmethod
    def init(cls, rng: RngStream, config: MnmefConfig, table: DistanceTable | None = None) -> "ParamStore":
        d_in = config.d_v + config.d_y
        parts = {
            "st": init_set_transformer(rng.child(0), d_in),
            "gain": _init_head(rng.child(1), config.d_v + 2 * config.d_y + D_ST, config.d_v + config.d_y),
            "infl": _init_head(rng.child(2), config.d_v + D_ST, config.d_v),
        }
        if config.use_localization:
            if table is None:
                raise ValueError("localization enabled but no distance table given")
            parts["loc"] = _init_head(rng.child(3), D_ST, table.n_distances)
        return cls(parts)

    def partition_sizes(self) -> dict[str, int]:
        return {name: count_params(arrs) for name, arrs in self.partitions.items()}

    def n_params(self) -> int:
        return sum(self.partition_sizes().values())

    def copy(self) -> "ParamStore":
        return ParamStore(
            {name: {k: v.copy() for k, v in arrs.items()} for name, arrs in self.partitions.items()},
            frozen=set(self.frozen),
        )

    def freeze(self, *names: str) -> None:
        for name in names:
            if name not in self.partitions:
                raise ValueError(f"unknown partition: {name}")
            self.frozen.add(name)

    def trainable_arrays(self):
        """Yield (partition, key, array) for every unfrozen parameter."""
        for name in sorted(self.partitions):
            if name in self.frozen:
                continue
            arrs = self.partitions[name]
            for key in sorted(arrs):
                yield name, key, arrs[key]

    def as_tensors(self, tape: ad.Tape | None):
        """Lift to tensors: leaves (gradient-tracked) for unfrozen partitions,
        constants for frozen ones.  ``tape=None`` lifts everything constant."""
        out: dict[str, dict[str, ad.Tensor]] = {}
        for name, arrs in self.partitions.items():
            lift_leaf = tape is not None and name not in self.frozen
            out[name] = {
                k: (tape.leaf(v) if lift_leaf else ad.constant(v)) for k, v in sorted(arrs.items())
            }
        return out


# ---------------------------------------------------------------------------
# heads


def head_mlp(x, p: dict, *, n_layers: int = 3):
    """Apply the shared head architecture: affine/ReLU stack ending affine."""
    out = x
    for i in range(1, n_layers + 1):
        out = ad.add(ad.matmul(out, ad.transpose(p[f"w{i}"])), p[f"b{i}"])
        if i < n_layers:
            out = ad.relu(out)
    return out


def _tile_members(t, n: int):
    """(B, d) -> (B, n, d) by broadcast against a zero constant."""
    b, d = t.shape
    return ad.add(ad.reshape(t, (b, 1, d)), ad.constant(np.zeros((n, 1))))


def corrections(v_hat, h_hat, y, f_v, gain_params):
    """Per-member anomaly corrections (w, z) from the gain head.

    ``v_hat``: (B, N, d_v), ``h_hat``: (B, N, d_y), ``y``: (B, d_y),
    ``f_v``: (B, D_ST).  Returns w: (B, N, d_v) and z: (B, N, d_y).
    """
    n = v_hat.shape[1]
    d_v = v_hat.shape[2]
    x = ad.concat([v_hat, h_hat, _tile_members(y, n), _tile_members(f_v, n)], axis=-1)
    out = head_mlp(x, gain_params)
    w = ad.slice_axis(out, -1, 0, d_v)
    z = ad.slice_axis(out, -1, d_v, out.shape[-1])
    return w, z


def learned_localization(f_v, loc_params, table: DistanceTable, mode: str = "logistic2"):
    """Distance weights in [0, 2] expanded into the L1/L2 Hadamard masks."""
    raw = head_mlp(f_v, loc_params)
    if mode == "logistic2":
        g_hat = ad.scale(ad.logistic(raw), 2.0)
    elif mode == "softmax2":
        g_hat = ad.scale(ad.softmax_axis(raw, axis=-1), 2.0)
    else:
        raise ValueError(f"unknown bounded-layer mode: {mode}")
    return table.build_matrices(g_hat)


def learned_gain(v_hat, h_hat, w, z, gamma, l1=None, l2=None):
    """Corrected-covariance gain ``(K1 o L1)(K2 o L2 + Gamma)^{-1}``.

    K1/K2 are 1/N-normalized outer-product sums of (anomaly + correction)
    vectors.  ``gamma`` is the (d_y, d_y) observation covariance; L masks are
    optional (None disables localization exactly).
    Returns K with shape (B, d_v, d_y).
    """
    n = v_hat.shape[1]
    v_mean = ad.mean_axis(v_hat, axis=1, keepdims=True)
    h_mean = ad.mean_axis(h_hat, axis=1, keepdims=True)
    va = ad.sub(v_hat, v_mean)
    ha = ad.sub(h_hat, h_mean)
    if w is not None:
        va = ad.add(va, w)
    if z is not None:
        ha = ad.add(ha, z)
    k1 = ad.scale(ad.matmul(ad.transpose(va), ha), 1.0 / n)
    k2 = ad.scale(ad.matmul(ad.transpose(ha), ha), 1.0 / n)
    if l1 is not None:
        k1 = ad.mul(k1, l1)
    if l2 is not None:
        k2 = ad.mul(k2, l2)
    shifted = ad.add(k2, ad.constant(gamma) if isinstance(gamma, np.ndarray) else gamma)
    return ad.transpose(ad.batched_solve_spd(shifted, ad.transpose(k1)))


def learned_inflation(v_analysis, f_v, infl_params):
    """Additive member adjustment from (analysis member, f_v); no access to
    the observation or its noise level."""
    n = v_analysis.shape[1]
    x = ad.concat([v_analysis, _tile_members(f_v, n)], axis=-1)
    return head_mlp(x, infl_params)


# ---------------------------------------------------------------------------
# one-step update


def mnmef_step(
    v,
    y,
    system,
    params_t: dict,
    config: MnmefConfig,
    process_noise: np.ndarray,
    obs_noise: np.ndarray,
    table: DistanceTable | None = None,
    zero_heads: bool = False,
    disable_inflation: bool = False,
):
    """Advance a batch of ensembles one assimilation cycle.

    ``v``: (B, N, d_v) tensor (current analysis members), ``y``: (B, d_y)
    observations, ``params_t``: tensor partitions from
    :meth:`ParamStore.as_tensors`.  ``process_noise`` (B, N, d_v) and
    ``obs_noise`` (B, N, d_y) are pre-scaled draws; passing the same arrays
    to a stochastic-EnKF runner reproduces its update exactly when heads are
    zeroed.  ``zero_heads`` bypasses all three heads (corrections zero, masks
    disabled, inflation zero); ``disable_inflation`` zeroes only the
    inflation term.
    """
    if not isinstance(v, ad.Tensor):
        v = ad.constant(np.asarray(v, dtype=np.float64))
    if not isinstance(y, ad.Tensor):
        y = ad.constant(np.asarray(y, dtype=np.float64))
    b, n, d_v = v.shape
    v_pred = ad.add(system.step(v), ad.constant(process_noise))
    h_pred = system.observe(v_pred)
    pairs = ad.concat([v_pred, h_pred], axis=-1)
    f_v = encode_ensemble(pairs, params_t["st"])

    w = z = l1 = l2 = None
    if not zero_heads:
        w, z = corrections(v_pred, h_pred, y, f_v, params_t["gain"])
        if config.use_localization:
            if table is None:
                raise ValueError("localization enabled but no distance table given")
            l1, l2 = learned_localization(f_v, params_t["loc"], table, config.loc_bounded_mode)

    gain = learned_gain(v_pred, h_pred, w, z, system.gamma(), l1, l2)
    # same operation order as the stochastic-EnKF innovation: (y - h) - noise
    innovation = ad.sub(
        ad.sub(ad.reshape(y, (b, 1, y.shape[-1])), h_pred), ad.constant(obs_noise)
    )
    v_new = ad.add(v_pred, ad.matmul(innovation, ad.transpose(gain)))

    if not zero_heads and not disable_inflation:
        v_new = ad.add(v_new, learned_inflation(v_new, f_v, params_t["infl"]))
    if config.clamp is not None:
        v_new = ad.clamp(v_new, config.clamp)
    return v_new


# ---------------------------------------------------------------------------
# checkpoint io


def _write_block(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_block(fh) -> bytes:
    raw = fh.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint (length field)")
    (length,) = struct.unpack("<I", raw)
    payload = fh.read(length)
    if len(payload) != length:
        raise CheckpointError("truncated checkpoint (block payload)")
    return payload


def save_checkpoint(path, store: ParamStore, config: MnmefConfig) -> None:
    """Binary parameter dump plus a human-readable ``.meta`` sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        _write_block(fh, config.system.encode())
        fh.write(struct.pack("<III", config.d_v, config.d_y, D_ST))
        sizes = store.partition_sizes()
        fh.write(struct.pack("<I", len(store.partitions)))
        for name in sorted(store.partitions):
            _write_block(fh, name.encode())
            fh.write(struct.pack("<Q", sizes[name]))
            arrs = store.partitions[name]
            fh.write(struct.pack("<I", len(arrs)))
            for key in sorted(arrs):
                arr = np.ascontiguousarray(arrs[key], dtype="<f8")
                _write_block(fh, key.encode())
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.tobytes())
    meta = {
        "system": config.system,
        "d_v": config.d_v,
        "d_y": config.d_y,
        "ensemble_size": config.ensemble_size,
        "clamp": "none" if config.clamp is None else repr(float(config.clamp)),
        "use_localization": str(config.use_localization).lower(),
        "loc_bounded_mode": config.loc_bounded_mode,
        "activation": config.activation,
        "j0": config.j0,
    }
    with open(f"{path}.meta", "w") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value}\n")


def load_checkpoint(path) -> tuple[ParamStore, MnmefConfig]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise CheckpointError(f"{path} is not a parameter checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        system = _read_block(fh).decode()
        d_v, d_y, d_st = struct.unpack("<III", fh.read(12))
        if d_st != D_ST:
            raise CheckpointError(f"checkpoint encoder width {d_st} != {D_ST}")
        (n_parts,) = struct.unpack("<I", fh.read(4))
        partitions: dict[str, dict[str, np.ndarray]] = {}
        for _ in range(n_parts):
            name = _read_block(fh).decode()
            (declared_size,) = struct.unpack("<Q", fh.read(8))
            (n_arrays,) = struct.unpack("<I", fh.read(4))
            arrs: dict[str, np.ndarray] = {}
            for _ in range(n_arrays):
                key = _read_block(fh).decode()
                (ndim,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
                count = int(np.prod(shape)) if shape else 1
                data = fh.read(8 * count)
                if len(data) != 8 * count:
                    raise CheckpointError("truncated checkpoint (array payload)")
                arrs[key] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
            got = count_params(arrs)
            if got != declared_size:
                raise CheckpointError(
                    f"partition {name}: declared {declared_size} params, found {got}"
                )
            partitions[name] = arrs

    meta: dict[str, str] = {}
    meta_path = Path(f"{path}.meta")
    if not meta_path.exists():
        raise CheckpointError(f"missing sidecar {meta_path}")
    for line in meta_path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key] = value
    config = MnmefConfig(
        system=system,
        d_v=d_v,
        d_y=d_y,
        ensemble_size=int(meta["ensemble_size"]),
        clamp=None if meta["clamp"] == "none" else float(meta["clamp"]),
        use_localization=meta["use_localization"] == "true",
        loc_bounded_mode=meta["loc_bounded_mode"],
        activation=meta["activation"],
        j0=int(meta["j0"]),
    )
    return ParamStore(partitions), config
