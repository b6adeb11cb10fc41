"""On-disk trajectory store: little-endian binary records plus a JSON manifest.

Layout of ``traj_<index>.bin``::

    magic   8 bytes  b"ENSDATRJ"
    version u32      1
    d_v     u32      state dimension
    d_y     u32      observation dimension
    n_steps u32      number of assimilation steps J
    dt      f64      assimilation interval
    seed    u64      base seed (the trajectory's stream id is its index)
    states  (J+1) * d_v f64, C-order
    observations J * d_y f64, C-order

The manifest (``manifest.json``) lists the system name, its parameter values
and the store counts. Writing is deterministic: the same seed and config
produce byte-identical stores.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .systems import SystemSpec, make_system
from .truth import TruthRun, generate_truth_batch

__all__ = ["write_store", "TrajectoryStore", "write_trajectory", "read_trajectory"]

MAGIC = b"ENSDATRJ"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIdQ")


class StoreFormatError(ValueError):
    """Raised when a trajectory file or manifest does not match the format."""


def _traj_path(root: Path, index: int) -> Path:
    return root / f"traj_{index:05d}.bin"


def write_trajectory(path: Path, run: TruthRun) -> None:
    d_v = run.states.shape[1]
    d_y = run.observations.shape[1]
    header = _HEADER.pack(MAGIC, VERSION, d_v, d_y, run.n_steps, run.dt, run.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(run.states, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(run.observations, dtype="<f8").tobytes())


def read_trajectory(path: Path, system: str = "", stream_id: int = -1) -> TruthRun:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise StoreFormatError(f"{path}: truncated header")
    magic, version, d_v, d_y, n_steps, dt, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    n_state = (n_steps + 1) * d_v
    n_obs = n_steps * d_y
    expected = _HEADER.size + 8 * (n_state + n_obs)
    if len(raw) != expected:
        raise StoreFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    states = body[:n_state].reshape(n_steps + 1, d_v).astype(np.float64)
    observations = body[n_state:].reshape(n_steps, d_y).astype(np.float64)
    return TruthRun(
        system=system,
        seed=seed,
        stream_id=stream_id,
        dt=dt,
        burn_in_steps=-1,
        states=states,
        observations=observations,
    )


def write_store(
    root,
    system: SystemSpec,
    n_trajectories: int,
    n_steps: int,
    seed: int,
    burn_in: int | None = None,
    batch_size: int = 64,
) -> dict:
    """Generate and persist a trajectory store; returns the manifest dict."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for begin in range(0, n_trajectories, batch_size):
        ids = range(begin, min(begin + batch_size, n_trajectories))
        for run in generate_truth_batch(system, n_steps, seed, ids, burn_in=burn_in):
            write_trajectory(_traj_path(root, run.stream_id), run)
    manifest = {
        "format_version": VERSION,
        "system": system.name,
        "system_params": system.params,
        "n_trajectories": n_trajectories,
        "n_steps": n_steps,
        "d_v": system.d_v,
        "d_y": system.d_y,
        "dt": system.dt,
        "seed": seed,
        "burn_in": "random" if burn_in is None else int(burn_in),
        "sigma_v": system.sigma_v,
        "sigma_y": system.sigma_y,
        "obs_offset": system.obs_offset,
        "obs_stride": system.obs_stride,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class TrajectoryStore:
    """Read access to a written store (manifest + per-index trajectories)."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise StoreFormatError(f"no manifest.json under {self.root}")
        with open(manifest_path) as fh:
            self.manifest = json.load(fh)

    def __len__(self) -> int:
        return int(self.manifest["n_trajectories"])

    def __getitem__(self, index: int) -> TruthRun:
        if not 0 <= index < len(self):
            raise IndexError(index)
        run = read_trajectory(_traj_path(self.root, index), system=self.manifest["system"], stream_id=index)
        return run

    def system(self) -> SystemSpec:
        """Rebuild the generating system spec from the manifest."""
        return make_system(
            self.manifest["system"],
            sigma_v=self.manifest["sigma_v"],
            sigma_y=self.manifest["sigma_y"],
        )
