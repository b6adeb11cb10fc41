"""Self-contained invariant checks for the `verify` command.

Each check re-derives an expected result from an independent route and
compares it against the library. They are fast, deterministic, and cover the
load-bearing identities: the learned filter's exact reduction to the
stochastic EnKF, permutation invariance of the encoder, taper endpoints,
inflation mean preservation, truncation-invariance of the training loss,
optimizer fixed points, checkpoint round-trips, and metric closed forms.

``run_checks`` returns structured results; ``parameter_count_report`` prints
per-system parameter budgets (informational, never failing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import generate_truth, make_system
from .evaluation import w2_gaussian
from .filters.api import run_assimilation
from .filters.classic import apply_inflation, gaspari_cohn
from .learned import DistanceTable, MnmefConfig, ParamStore, load_checkpoint, save_checkpoint
from .numerics import RngStream
from .settransformer import encode_ensemble, init_set_transformer
from .training import OptimizerState, TrainConfig, adamw_step, batch_loss_and_grads

__all__ = ["CheckResult", "run_checks", "parameter_count_report", "ALL_CHECKS"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check_enkf_reduction() -> str:
    system = make_system("linear")
    truth = generate_truth(system, 20, RngStream(41))
    config = MnmefConfig.for_system(system, 8)
    store = ParamStore.init(RngStream(17), config, None)
    a = run_assimilation("enkf", system, truth, 8, seed=23)
    b = run_assimilation("mnmef", system, truth, 8, seed=23, model=(store, config, None))
    gap = float(np.max(np.abs(a.means - b.means)))
    if gap > 1e-10:
        raise AssertionError(f"reduction gap {gap:.3e} exceeds 1e-10")
    return f"max gap {gap:.1e}"


def _check_encoder_permutation_invariance() -> str:
    params = init_set_transformer(RngStream(3), 5)
    worst = 0.0
    for n in (2, 7, 16):
        pairs = RngStream(100 + n).standard_normal((n, 5))
        base = encode_ensemble(pairs, params)
        perm = RngStream(200 + n).permutation(n)
        out = encode_ensemble(pairs[perm], params)
        base_v = base.value if isinstance(base, ad.Tensor) else base
        out_v = out.value if isinstance(out, ad.Tensor) else out
        worst = max(worst, float(np.max(np.abs(base_v - out_v))))
    if worst > 1e-12:
        raise AssertionError(f"permutation gap {worst:.3e} exceeds 1e-12")
    return f"max gap {worst:.1e}"


def _check_taper_endpoints() -> str:
    vals = gaspari_cohn(np.array([0.0, 1.0, 2.0, 2.5]))
    expected = np.array([1.0, 5.0 / 24.0, 0.0, 0.0])
    if not np.allclose(vals, expected, atol=1e-15):
        raise AssertionError(f"taper endpoints {vals} != {expected}")
    return "g(0)=1, g(1)=5/24, g(>=2)=0"


def _check_inflation_preserves_mean() -> str:
    v = RngStream(5).standard_normal((12, 4))
    out = apply_inflation(v, 1.7)
    gap = float(np.max(np.abs(out.mean(axis=0) - v.mean(axis=0))))
    if gap > 1e-12:
        raise AssertionError(f"inflation moved the mean by {gap:.3e}")
    return f"mean moved {gap:.1e}"


def _check_loss_truncation_invariance() -> str:
    system = make_system("lorenz63")
    runs = [generate_truth(system, 4, RngStream(7).child(i), burn_in=50) for i in range(2)]
    truths = np.stack([r.states for r in runs])
    observations = np.stack([r.observations for r in runs])
    config = MnmefConfig.for_system(system, 3)
    store = ParamStore.init(RngStream(2), config, None)
    v0 = truths[:, 0][:, None, :] + RngStream(9).standard_normal((2, 3, 3))
    values = []
    for j0 in (1, 2, 4):
        loss, _ = batch_loss_and_grads(
            store, config, system, None, truths, observations, v0,
            RngStream(30), j0=j0, compute_grads=False,
        )
        values.append(loss)
    spread = max(values) - min(values)
    if spread > 1e-12 * max(abs(v) for v in values):
        raise AssertionError(f"loss varies with j0: {values}")
    return f"spread {spread:.1e}"


def _check_adamw_zero_gradient_fixed_point() -> str:
    store = ParamStore({"gain": {"p": np.array([1.0, -2.0, 3.0])}})
    before = store.partitions["gain"]["p"].copy()
    state = OptimizerState(store)
    adamw_step(state, store, {("gain", "p"): np.zeros(3)}, lr=0.1)
    if not np.array_equal(store.partitions["gain"]["p"], before):
        raise AssertionError("zero gradient moved parameters")
    return "parameters unchanged"


def _check_checkpoint_roundtrip() -> str:
    import tempfile
    from pathlib import Path

    system = make_system("lorenz96")
    table = DistanceTable(system.d_v, system.obs_indices)
    config = MnmefConfig.for_system(system, 10)
    store = ParamStore.init(RngStream(11), config, table)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.mnm"
        save_checkpoint(path, store, config)
        loaded, loaded_config = load_checkpoint(path)
    for name, arrs in store.partitions.items():
        for key, arr in arrs.items():
            if not np.array_equal(loaded.partitions[name][key], arr):
                raise AssertionError(f"array {name}.{key} changed in round-trip")
    if loaded_config != config:
        raise AssertionError("config changed in round-trip")
    return f"{store.n_params()} parameters bit-identical"


def _check_w2_identities() -> str:
    c = np.array([[2.0, 0.5], [0.5, 1.0]])
    zero = w2_gaussian([0.0, 1.0], c, [0.0, 1.0], c)
    shift = w2_gaussian([0.0], [[1.0]], [3.0], [[1.0]])
    if zero > 1e-7:
        raise AssertionError(f"identical Gaussians score {zero:.3e}")
    if abs(shift - 3.0) > 1e-12:
        raise AssertionError(f"mean shift scored {shift} != 3")
    return "zero on identical, exact on mean shift"


def _check_distance_table() -> str:
    system = make_system("lorenz96")
    table = DistanceTable(system.d_v, system.obs_indices)
    if table.n_distances != 21 or not np.array_equal(table.values, np.arange(21.0)):
        raise AssertionError(f"distance values {table.values}")
    if table.l1_index.shape != (40, 10) or table.l2_index.shape != (10, 10):
        raise AssertionError("lookup index shapes wrong")
    return "21 distances, 40x10 and 10x10 lookups"


ALL_CHECKS = {
    "enkf-reduction": _check_enkf_reduction,
    "encoder-permutation-invariance": _check_encoder_permutation_invariance,
    "taper-endpoints": _check_taper_endpoints,
    "inflation-mean": _check_inflation_preserves_mean,
    "loss-truncation-invariance": _check_loss_truncation_invariance,
    "adamw-fixed-point": _check_adamw_zero_gradient_fixed_point,
    "checkpoint-roundtrip": _check_checkpoint_roundtrip,
    "w2-identities": _check_w2_identities,
    "distance-table": _check_distance_table,
}


def run_checks(names=None) -> list[CheckResult]:
    results = []
    for name, fn in ALL_CHECKS.items():
        if names and name not in names:
            continue
        try:
            detail = fn()
            results.append(CheckResult(name, True, detail))
        except Exception as exc:  # report, never crash the harness
            results.append(CheckResult(name, False, str(exc)))
    return results


def parameter_count_report() -> list[str]:
    """Per-system parameter budgets (informational)."""
    lines = []
    for name in ("lorenz63", "lorenz96", "ks"):
        system = make_system(name)
        table = (
            DistanceTable(system.d_v, system.obs_indices) if name != "lorenz63" else None
        )
        config = MnmefConfig.for_system(system, 10)
        store = ParamStore.init(RngStream(0), config, table)
        sizes = store.partition_sizes()
        head_total = sum(v for k, v in sizes.items() if k != "st")
        lines.append(
            f"{name}: total={store.n_params()} encoder={sizes['st']} heads={head_total} "
            + " ".join(f"{k}={v}" for k, v in sorted(sizes.items()) if k != "st")
        )
    return lines
