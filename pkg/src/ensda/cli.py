"""Command-line interface.

Subcommands
-----------
gen-data     generate and store truth trajectories
pretrain     train the learned filter from scratch
finetune     adapt a checkpoint to a new ensemble size (encoder frozen)
run-filter   run one assimilation method over stored trajectories
grid-search  tune inflation / localization radius for a classical baseline
evaluate     score stored mean estimates against stored truth
linear-exp   train on the linear system, tracking distance to the exact filter
verify       run the built-in invariant checks

Tunable options resolve in three layers: built-in defaults, then a flat
``key=value`` config file (``--config``), then explicit flags.  Structural
arguments (paths, ``--method``, the subcommand itself) are flag-only.  Every
command that produces files also writes the fully resolved configuration to
``resolved_config.txt`` next to its outputs, so a run can be reproduced from
that file alone; given identical configuration and seed, output files are
byte-identical (wall times appear only in the training log).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.  ``verify`` exits 1 if any invariant check fails.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dynamics import make_system
from .dynamics.store import StoreFormatError, TrajectoryStore, write_store
from .evaluation import (
    AllDivergedError,
    DegenerateTruthError,
    LinearExperimentConfig,
    MetricReport,
    grid_search,
    linear_experiment,
    r_rmse,
    run_r_rmse,
    write_metrics_csv,
    write_summary_csv,
)
from .filters.api import METHOD_NAMES, run_assimilation
from .filters.classic import NonFiniteError
from .learned import CheckpointError, DistanceTable, load_checkpoint, save_checkpoint
from .numerics import NotSPDError
from .training import TrainConfig, TrainingDivergence, finetune, pretrain, write_training_log
from .verification import ALL_CHECKS, parameter_count_report, run_checks

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_CLASSIC_METHODS = tuple(m for m in METHOD_NAMES if m != "mnmef")


class CliError(Exception):
    """Carries the process exit code alongside the message."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# option plumbing: defaults < config file < flags


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"expected a number, got {text!r}") from None


def _parse_str(text: str) -> str:
    return text


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise CliError(EXIT_CONFIG, f"expected true/false, got {text!r}")


def _parse_opt_int(text: str):
    return None if text.strip().lower() == "none" else _parse_int(text)


def _parse_opt_float(text: str):
    return None if text.strip().lower() == "none" else _parse_float(text)


def _parse_float_list(text: str) -> tuple:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise CliError(EXIT_CONFIG, f"expected a comma-separated list, got {text!r}")
    return tuple(_parse_float(t) for t in items)


def _parse_radius_list(text: str) -> tuple:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise CliError(EXIT_CONFIG, f"expected a comma-separated list, got {text!r}")
    return tuple(None if t.lower() == "none" else _parse_float(t) for t in items)


@dataclass(frozen=True)
class Option:
    """One tunable: a config-file key that is also an overriding flag."""

    name: str
    parse: object
    default: object
    help: str
    is_flag: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _training_options(traj: int, steps: int, members: int, epochs: int, batch: int,
                      lr: float, wd: float) -> list[Option]:
    return [
        Option("traj", _parse_int, traj, "trajectories used for training"),
        Option("steps", _parse_int, steps, "assimilation steps per trajectory"),
        Option("members", _parse_int, members, "ensemble size"),
        Option("epochs", _parse_int, epochs, "training epochs"),
        Option("batch", _parse_int, batch, "trajectories per optimizer step"),
        Option("lr", _parse_float, lr, "base learning rate"),
        Option("j0", _parse_int, 5, "gradient-truncation window length"),
        Option("wd", _parse_float, wd, "decoupled weight decay"),
        Option("seed", _parse_int, 0, "root seed"),
        Option("unnormalized_loss", None, False,
               "use the plain squared-error loss instead of the normalized one",
               is_flag=True),
        Option("workers", _parse_int, 1,
               "worker count (reserved; execution is serial and deterministic)"),
    ]


_OPTIONS: dict[str, list[Option]] = {
    "gen-data": [
        Option("system", _parse_str, None, "system name (lorenz63|lorenz96|ks|linear)"),
        Option("traj", _parse_int, 4, "number of trajectories"),
        Option("len", _parse_int, 10, "assimilation steps per trajectory"),
        Option("seed", _parse_int, 0, "root seed"),
        Option("burn_in", _parse_opt_int, None,
               "fixed burn-in steps (default: random per trajectory)"),
        Option("sigma_v", _parse_opt_float, None, "process-noise std override"),
        Option("sigma_y", _parse_opt_float, None, "observation-noise std override"),
        Option("workers", _parse_int, 1,
               "worker count (reserved; execution is serial and deterministic)"),
    ],
    "pretrain": _training_options(256, 30, 10, 50, 32, 1e-3, 0.0) + [
        Option("finetune_epochs", _parse_int, 5, "epoch budget recorded for later fine-tuning"),
        Option("bounded_mode", _parse_str, "logistic2",
               "bounded output layer of the localization head (logistic2|softmax2)"),
        Option("activation", _parse_str, "relu", "head activation"),
        Option("epoch_checkpoints", None, False,
               "write a checkpoint after every epoch under checkpoints/", is_flag=True),
    ],
    "finetune": _training_options(256, 30, 40, 5, 32, 1e-3, 0.0),
    "run-filter": [
        Option("members", _parse_int, 10, "ensemble size"),
        Option("seed", _parse_int, 0, "base seed; trajectory i uses seed+i"),
        Option("inflation", _parse_float, 1.0, "multiplicative inflation (classical methods)"),
        Option("loc_radius", _parse_opt_float, None, "localization radius (enkf/letkf)"),
        Option("sigma_y", _parse_opt_float, None, "assumed observation-noise std override"),
        Option("test_traj", _parse_opt_int, None, "trajectories to run (default: all)"),
        Option("checkpoint", _parse_str, None, "model checkpoint (required for mnmef)"),
        Option("zero_heads", None, False,
               "debug: zero all learned-head outputs (mnmef only)", is_flag=True),
        Option("disable_inflation", None, False,
               "debug: skip the learned inflation update (mnmef only)", is_flag=True),
        Option("workers", _parse_int, 1,
               "worker count (reserved; execution is serial and deterministic)"),
    ],
    "grid-search": [
        Option("members", _parse_int, 10, "ensemble size"),
        Option("seed", _parse_int, 0, "base seed; trajectory i uses seed+i"),
        Option("test_traj", _parse_opt_int, None, "trajectories per grid cell (default: all)"),
        Option("inflation_grid", _parse_float_list, (1.0, 1.05, 1.1, 1.15, 1.2),
               "comma-separated inflation factors"),
        Option("radius_grid", _parse_radius_list, (None,),
               "comma-separated localization radii; 'none' disables localization"),
        Option("sigma_y", _parse_opt_float, None, "assumed observation-noise std override"),
        Option("workers", _parse_int, 1,
               "worker count (reserved; execution is serial and deterministic)"),
    ],
    "evaluate": [
        Option("method_label", _parse_str, "external", "method name recorded in the CSVs"),
        Option("members", _parse_int, 0, "ensemble size recorded in the CSVs"),
        Option("seed", _parse_int, 0, "seed recorded in the CSVs"),
        Option("test_traj", _parse_opt_int, None, "trajectories to score (default: all)"),
        Option("workers", _parse_int, 1,
               "worker count (reserved; execution is serial and deterministic)"),
    ],
    "linear-exp": [
        Option("members", _parse_int, 10, "ensemble size"),
        Option("traj", _parse_int, 64, "training trajectories"),
        Option("steps", _parse_int, 30, "training steps per trajectory"),
        Option("epochs", _parse_int, 3, "training epochs per loss setting"),
        Option("batch", _parse_int, 16, "trajectories per optimizer step"),
        Option("lr", _parse_float, 1e-3, "learning rate"),
        Option("j0", _parse_int, 5, "gradient-truncation window length"),
        Option("wd", _parse_float, 1e-2, "weight decay used by the *_wd settings"),
        Option("test_traj", _parse_int, 16, "held-out trajectories"),
        Option("test_steps", _parse_int, 100, "held-out trajectory length"),
        Option("seed", _parse_int, 0, "root seed"),
        Option("workers", _parse_int, 1,
               "worker count (reserved; execution is serial and deterministic)"),
    ],
    "verify": [],
}


def _read_config_file(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config file {path}: {exc}") from None
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _resolve_options(args, options: list[Option]) -> dict:
    resolved = {opt.name: opt.default for opt in options}
    by_name = {opt.name: opt for opt in options}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, raw in _read_config_file(config_path).items():
            opt = by_name.get(key)
            if opt is None:
                raise CliError(EXIT_CONFIG, f"unknown config key {key!r} in {config_path}")
            resolved[key] = _parse_bool(raw) if opt.is_flag else opt.parse(raw)
    for opt in options:
        value = getattr(args, opt.name, None)
        if value is not None:
            resolved[opt.name] = True if opt.is_flag else opt.parse(value)
    if resolved.get("workers", 1) < 1:
        raise CliError(EXIT_CONFIG, "--workers must be at least 1")
    return resolved


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _write_snapshot(out_dir: Path, command: str, resolved: dict, paths: dict) -> None:
    lines = [f"command={command}"]
    for key in sorted(paths):
        lines.append(f"{key}={paths[key]}")
    for key in sorted(resolved):
        lines.append(f"{key}={_format_value(resolved[key])}")
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# shared helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _open_store(path: str) -> TrajectoryStore:
    root = Path(path)
    if not root.exists():
        raise CliError(EXIT_DATA, f"data directory not found: {root}")
    try:
        return TrajectoryStore(root)
    except (StoreFormatError, OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"cannot open trajectory store {root}: {exc}") from None


def _store_system(store: TrajectoryStore, sigma_y=None):
    manifest = store.manifest
    return make_system(
        manifest["system"],
        sigma_v=manifest["sigma_v"],
        sigma_y=manifest["sigma_y"] if sigma_y is None else sigma_y,
    )


def _load_runs(store: TrajectoryStore, count):
    total = len(store)
    wanted = total if count is None else int(count)
    if wanted <= 0:
        raise CliError(EXIT_CONFIG, "trajectory count must be positive")
    if wanted > total:
        raise CliError(EXIT_DATA, f"store has {total} trajectories, {wanted} requested")
    try:
        return [store[i] for i in range(wanted)]
    except (StoreFormatError, OSError) as exc:
        raise CliError(EXIT_DATA, f"cannot read trajectory: {exc}") from None


def _load_model(checkpoint: str, system, members: int):
    """Load a checkpoint and adapt its config to the requested ensemble size."""
    path = Path(checkpoint)
    if not path.exists():
        raise CliError(EXIT_DATA, f"checkpoint not found: {path}")
    try:
        params, config = load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_DATA, f"cannot load checkpoint {path}: {exc}") from None
    if config.system != system.name:
        raise CliError(
            EXIT_CONFIG,
            f"checkpoint was trained on {config.system!r}, data store is {system.name!r}",
        )
    if config.ensemble_size != members:
        config = replace(config, ensemble_size=members)
    table = DistanceTable(system.d_v, system.obs_indices) if config.use_localization else None
    return params, config, table


def _write_means_csv(path: Path, means: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"v{k}" for k in range(means.shape[1])])
        for j, row in enumerate(means):
            writer.writerow([j] + [repr(float(x)) for x in row])


def _read_means_csv(path: Path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "step":
                raise CliError(EXIT_DATA, f"{path}: not a mean-estimate CSV")
            rows = [[float(x) for x in row[1:]] for row in reader]
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_DATA, f"{path}: {exc}") from None
    if not rows:
        raise CliError(EXIT_DATA, f"{path}: no estimate rows")
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    opts = _resolve_options(args, _OPTIONS["gen-data"])
    if opts["system"] is None:
        raise CliError(EXIT_CONFIG, "--system is required")
    try:
        system = make_system(opts["system"], sigma_v=opts["sigma_v"], sigma_y=opts["sigma_y"])
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    if opts["traj"] <= 0 or opts["len"] <= 0:
        raise CliError(EXIT_CONFIG, "--traj and --len must be positive")
    if opts["burn_in"] is not None and opts["burn_in"] < 0:
        raise CliError(EXIT_CONFIG, "--burn-in must be non-negative")
    out = _out_dir(args)
    write_store(out, system, opts["traj"], opts["len"], opts["seed"], burn_in=opts["burn_in"])
    _write_snapshot(out, "gen-data", opts, {})
    print(f"wrote {opts['traj']} x {opts['len']}-step {system.name} trajectories to {out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    opts = _resolve_options(args, _OPTIONS["pretrain"])
    store = _open_store(args.data)
    system = _store_system(store)
    try:
        config = TrainConfig(
            system=system.name,
            n_trajectories=opts["traj"],
            n_steps=opts["steps"],
            n_members=opts["members"],
            epochs=opts["epochs"],
            batch_size=opts["batch"],
            learning_rate=opts["lr"],
            j0=opts["j0"],
            weight_decay=opts["wd"],
            seed=opts["seed"],
            loss_normalized=not opts["unnormalized_loss"],
            finetune_epochs=opts["finetune_epochs"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    if len(store) < config.n_trajectories:
        raise CliError(
            EXIT_DATA,
            f"store has {len(store)} trajectories, training needs {config.n_trajectories}",
        )
    if int(store.manifest["n_steps"]) < config.n_steps:
        raise CliError(
            EXIT_DATA,
            f"store trajectories have {store.manifest['n_steps']} steps, "
            f"training needs {config.n_steps}",
        )
    out = _out_dir(args)
    _write_snapshot(out, "pretrain", opts, {"data": args.data})
    checkpoint_dir = None
    if opts["epoch_checkpoints"]:
        checkpoint_dir = out / "checkpoints"
        checkpoint_dir.mkdir(exist_ok=True)
    overrides = {"loc_bounded_mode": opts["bounded_mode"], "activation": opts["activation"]}
    try:
        params, mnmef_config, _, history = pretrain(
            config, system, store, checkpoint_dir=checkpoint_dir, mnmef_overrides=overrides
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    save_checkpoint(out / "model.mnm", params, mnmef_config)
    write_training_log(out / "training_log.csv", history)
    print(
        f"pretrained on {system.name}: loss {history[0].loss:.6g} -> {history[-1].loss:.6g} "
        f"over {len(history)} epochs; checkpoint at {out / 'model.mnm'}"
    )
    return EXIT_OK


def _cmd_finetune(args) -> int:
    opts = _resolve_options(args, _OPTIONS["finetune"])
    store = _open_store(args.data)
    system = _store_system(store)
    checkpoint_path = Path(args.checkpoint)
    if not checkpoint_path.exists():
        raise CliError(EXIT_DATA, f"checkpoint not found: {checkpoint_path}")
    try:
        pretrained, ck_config = load_checkpoint(checkpoint_path)
    except CheckpointError as exc:
        raise CliError(EXIT_DATA, f"cannot load checkpoint {checkpoint_path}: {exc}") from None
    if ck_config.system != system.name:
        raise CliError(
            EXIT_CONFIG,
            f"checkpoint was trained on {ck_config.system!r}, data store is {system.name!r}",
        )
    try:
        config = TrainConfig(
            system=system.name,
            n_trajectories=opts["traj"],
            n_steps=opts["steps"],
            n_members=ck_config.ensemble_size,
            epochs=opts["epochs"],
            batch_size=opts["batch"],
            learning_rate=opts["lr"],
            j0=opts["j0"],
            weight_decay=opts["wd"],
            seed=opts["seed"],
            loss_normalized=not opts["unnormalized_loss"],
            finetune_epochs=opts["epochs"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    needed = max(1, config.n_trajectories // 2)
    if len(store) < needed:
        raise CliError(
            EXIT_DATA, f"store has {len(store)} trajectories, fine-tuning needs {needed}"
        )
    if int(store.manifest["n_steps"]) < config.n_steps:
        raise CliError(
            EXIT_DATA,
            f"store trajectories have {store.manifest['n_steps']} steps, "
            f"fine-tuning needs {config.n_steps}",
        )
    out = _out_dir(args)
    _write_snapshot(
        out, "finetune", opts,
        {"checkpoint": args.checkpoint, "data": args.data},
    )
    overrides = {
        "clamp": ck_config.clamp,
        "loc_bounded_mode": ck_config.loc_bounded_mode,
        "activation": ck_config.activation,
    }
    try:
        params, mnmef_config, _, history = finetune(
            pretrained, opts["members"], config, system, store, mnmef_overrides=overrides
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    save_checkpoint(out / "model.mnm", params, mnmef_config)
    write_training_log(out / "training_log.csv", history)
    print(
        f"fine-tuned to N={opts['members']}: loss {history[0].loss:.6g} -> "
        f"{history[-1].loss:.6g}; checkpoint at {out / 'model.mnm'}"
    )
    return EXIT_OK


def _cmd_run_filter(args) -> int:
    opts = _resolve_options(args, _OPTIONS["run-filter"])
    method = args.method
    if method != "mnmef":
        for flag in ("zero_heads", "disable_inflation"):
            if opts[flag]:
                raise CliError(EXIT_CONFIG, f"--{flag.replace('_', '-')} requires --method mnmef")
        if opts["checkpoint"] is not None:
            raise CliError(EXIT_CONFIG, "--checkpoint requires --method mnmef")
    store = _open_store(args.data)
    system = _store_system(store, sigma_y=opts["sigma_y"])
    runs = _load_runs(store, opts["test_traj"])
    model = None
    if method == "mnmef":
        if opts["checkpoint"] is None:
            raise CliError(EXIT_CONFIG, "--method mnmef requires --checkpoint")
        model = _load_model(opts["checkpoint"], system, opts["members"])
    if method == "letkf" and opts["loc_radius"] is None:
        raise CliError(EXIT_CONFIG, "--method letkf requires --loc-radius")
    out = _out_dir(args)
    _write_snapshot(out, "run-filter", opts, {"data": args.data, "method": method})
    scores = []
    n_diverged = 0
    for i, run in enumerate(runs):
        try:
            record = run_assimilation(
                method, system, run, opts["members"], seed=opts["seed"] + i,
                inflation=opts["inflation"], loc_radius=opts["loc_radius"], model=model,
                zero_heads=opts["zero_heads"], disable_inflation=opts["disable_inflation"],
            )
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
        scores.append(run_r_rmse(record))
        n_diverged += int(record.diverged)
        _write_means_csv(out / f"means_{i:04d}.csv", record.means)
    report = MetricReport(
        method=method, system=system.name, n_members=opts["members"],
        sigma_y=system.sigma_y, seed=opts["seed"], per_trajectory=np.array(scores),
    )
    write_metrics_csv(out / "metrics.csv", [report])
    write_summary_csv(out / "summary.csv", [report])
    print(
        f"{method} on {system.name}, N={opts['members']}: mean R-RMSE {report.mean:.6g} "
        f"over {len(runs)} trajectories ({n_diverged} diverged)"
    )
    if n_diverged:
        raise CliError(EXIT_DIVERGED, f"{n_diverged} of {len(runs)} runs diverged")
    return EXIT_OK


def _cmd_grid_search(args) -> int:
    opts = _resolve_options(args, _OPTIONS["grid-search"])
    method = args.method
    if method == "letkf" and any(r is None for r in opts["radius_grid"]):
        raise CliError(EXIT_CONFIG, "letkf requires numeric radii in --radius-grid")
    store = _open_store(args.data)
    system = _store_system(store, sigma_y=opts["sigma_y"])
    runs = _load_runs(store, opts["test_traj"])
    out = _out_dir(args)
    _write_snapshot(out, "grid-search", opts, {"data": args.data, "method": method})
    try:
        result = grid_search(
            method, system, runs, opts["members"],
            inflation_grid=opts["inflation_grid"], radius_grid=opts["radius_grid"],
            seed=opts["seed"], heatmap_path=out / "heatmap.csv",
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    with open(out / "best.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "inflation", "radius", "mean_r_rmse"])
        writer.writerow([
            result.method,
            repr(result.best_inflation),
            "" if result.best_radius is None else repr(result.best_radius),
            repr(result.best_score),
        ])
    radius_text = "none" if result.best_radius is None else f"{result.best_radius:g}"
    print(
        f"best {method}: inflation {result.best_inflation:g}, radius {radius_text}, "
        f"mean R-RMSE {result.best_score:.6g}"
    )
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    opts = _resolve_options(args, _OPTIONS["evaluate"])
    store = _open_store(args.data)
    system = _store_system(store)
    runs = _load_runs(store, opts["test_traj"])
    means_root = Path(args.means)
    if not means_root.exists():
        raise CliError(EXIT_DATA, f"estimates directory not found: {means_root}")
    scores = []
    for i, run in enumerate(runs):
        path = means_root / f"means_{i:04d}.csv"
        if not path.exists():
            raise CliError(EXIT_DATA, f"missing estimate file: {path}")
        means = _read_means_csv(path)
        if means.shape != run.states[1:].shape:
            raise CliError(
                EXIT_DATA,
                f"{path}: estimate shape {means.shape} does not match truth "
                f"{run.states[1:].shape}",
            )
        if not np.all(np.isfinite(means)):
            scores.append(float("inf"))
            continue
        try:
            scores.append(r_rmse(means, run.states[1:]))
        except DegenerateTruthError as exc:
            raise CliError(EXIT_DATA, str(exc)) from None
    report = MetricReport(
        method=opts["method_label"], system=system.name, n_members=opts["members"],
        sigma_y=system.sigma_y, seed=opts["seed"], per_trajectory=np.array(scores),
    )
    out = _out_dir(args)
    _write_snapshot(out, "evaluate", opts, {"data": args.data, "means": args.means})
    write_metrics_csv(out / "metrics.csv", [report])
    write_summary_csv(out / "summary.csv", [report])
    print(
        f"{opts['method_label']} on {system.name}: mean R-RMSE {report.mean:.6g} "
        f"over {len(runs)} trajectories"
    )
    return EXIT_OK


def _cmd_linear_exp(args) -> int:
    opts = _resolve_options(args, _OPTIONS["linear-exp"])
    try:
        config = LinearExperimentConfig(
            n_members=opts["members"],
            train_trajectories=opts["traj"],
            train_steps=opts["steps"],
            epochs=opts["epochs"],
            batch_size=opts["batch"],
            learning_rate=opts["lr"],
            j0=opts["j0"],
            weight_decay=opts["wd"],
            test_trajectories=opts["test_traj"],
            test_steps=opts["test_steps"],
            seed=opts["seed"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = _out_dir(args)
    _write_snapshot(out, "linear-exp", opts, {})
    results = linear_experiment(config, out_dir=out)
    for result in results:
        final = result.curve[-1][1]
        status = (
            f"diverged at epoch {result.diverged_at}"
            if result.diverged_at is not None
            else f"final W2 {final:.6g}"
        )
        print(f"{result.setting}: {status} (sampling baseline {result.baseline_w2:.6g})")
    return EXIT_OK


def _cmd_verify(args) -> int:
    names = args.check or None
    if names:
        unknown = sorted(set(names) - set(ALL_CHECKS))
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown checks: {', '.join(unknown)}")
    results = run_checks(names)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name}: {result.detail}")
    if not names:
        for line in parameter_count_report():
            print(f"info parameters {line}")
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_options(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", default=None,
                        help="flat key=value file; flags override its values")
    for opt in _OPTIONS[command]:
        if opt.is_flag:
            parser.add_argument(opt.flag, dest=opt.name, action="store_true",
                                default=None, help=opt.help)
        else:
            parser.add_argument(opt.flag, dest=opt.name, default=None, help=opt.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensda",
        description="Ensemble data assimilation: classical filters and a learned filter.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and store truth trajectories")
    p.add_argument("--out", required=True, help="output directory for the trajectory store")
    _add_options(p, "gen-data")

    p = sub.add_parser("pretrain", help="train the learned filter from scratch")
    p.add_argument("--data", required=True, help="trajectory store directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_options(p, "pretrain")

    p = sub.add_parser("finetune", help="adapt a checkpoint to a new ensemble size")
    p.add_argument("--checkpoint", required=True, help="pretrained model checkpoint")
    p.add_argument("--data", required=True, help="trajectory store directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_options(p, "finetune")

    p = sub.add_parser("run-filter", help="run one assimilation method over stored trajectories")
    p.add_argument("--method", required=True, choices=METHOD_NAMES)
    p.add_argument("--data", required=True, help="trajectory store directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_options(p, "run-filter")

    p = sub.add_parser("grid-search", help="tune inflation/radius for a classical baseline")
    p.add_argument("--method", default="enkf", choices=_CLASSIC_METHODS)
    p.add_argument("--data", required=True, help="trajectory store directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_options(p, "grid-search")

    p = sub.add_parser("evaluate", help="score stored mean estimates against stored truth")
    p.add_argument("--data", required=True, help="trajectory store directory")
    p.add_argument("--means", required=True, help="directory holding means_XXXX.csv files")
    p.add_argument("--out", required=True, help="output directory")
    _add_options(p, "evaluate")

    p = sub.add_parser("linear-exp", help="loss-setting comparison on the linear system")
    p.add_argument("--out", required=True, help="output directory")
    _add_options(p, "linear-exp")

    p = sub.add_parser("verify", help="run the built-in invariant checks")
    p.add_argument("--check", action="append", metavar="NAME",
                   help="run only the named check (repeatable); "
                        f"choices: {', '.join(sorted(ALL_CHECKS))}")
    _add_options(p, "verify")

    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "run-filter": _cmd_run_filter,
    "grid-search": _cmd_grid_search,
    "evaluate": _cmd_evaluate,
    "linear-exp": _cmd_linear_exp,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help, matching our codes
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, AllDivergedError, NotSPDError, NonFiniteError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except StoreFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
