"""Dynamical systems, truth-trajectory generation and the on-disk store."""

from .ks import KSStepper
from .odes import lorenz63_rhs, lorenz96_rhs, rk4_step, rk4_steps
from .store import TrajectoryStore, read_trajectory, write_store, write_trajectory
from .systems import (
    SYSTEM_NAMES,
    SystemSpec,
    kuramoto_sivashinsky,
    linear_rotation,
    lorenz63,
    lorenz96,
    make_system,
    rotation_matrix,
)
from .truth import BURN_IN_MAX, BURN_IN_MIN, TruthRun, generate_truth, generate_truth_batch

__all__ = [
    "KSStepper",
    "lorenz63_rhs",
    "lorenz96_rhs",
    "rk4_step",
    "rk4_steps",
    "TrajectoryStore",
    "read_trajectory",
    "write_store",
    "write_trajectory",
    "SYSTEM_NAMES",
    "SystemSpec",
    "kuramoto_sivashinsky",
    "linear_rotation",
    "lorenz63",
    "lorenz96",
    "make_system",
    "rotation_matrix",
    "TruthRun",
    "generate_truth",
    "generate_truth_batch",
    "BURN_IN_MIN",
    "BURN_IN_MAX",
]
