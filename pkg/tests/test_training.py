"""Tests for loss computation, gradient truncation, AdamW, and the
pretrain/fine-tune loops."""

import numpy as np
import pytest

import ensda.autodiff as ad
from ensda.dynamics import generate_truth, make_system
from ensda.learned import DistanceTable, MnmefConfig, ParamStore, mnmef_step
from ensda.numerics import RngStream
from ensda.training import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    batch_loss_and_grads,
    finetune,
    finetune_config,
    paper_scale_config,
    pretrain,
    trajectory_loss,
    write_training_log,
)


def make_runs(system, count, n_steps, seed=5, burn_in=50):
    return [
        generate_truth(system, n_steps, RngStream(seed).child(i), burn_in=burn_in)
        for i in range(count)
    ]


def tiny_setup(n_members=4, batch=3, n_steps=4, seed=2):
    system = make_system("lorenz63")
    runs = make_runs(system, batch, n_steps)
    truths = np.stack([r.states for r in runs])
    observations = np.stack([r.observations for r in runs])
    config = MnmefConfig.for_system(system, n_members)
    store = ParamStore.init(RngStream(seed), config, None)
    v0 = truths[:, 0][:, None, :] + RngStream(seed + 1).standard_normal(
        (batch, n_members, system.d_v)
    )
    return system, store, config, truths, observations, v0


class TestTrajectoryLoss:
    def test_perfect_estimate_gives_zero(self):
        truth = RngStream(0).standard_normal((5, 3))
        assert trajectory_loss(truth, truth) == 0.0

    def test_zero_estimate_gives_one(self):
        truth = 1.0 + RngStream(1).uniform(shape=(6, 2))
        assert trajectory_loss(np.zeros_like(truth), truth) == pytest.approx(1.0, abs=1e-15)

    def test_two_step_hand_case(self):
        truth = np.array([[1.0, 0.0], [0.0, 2.0]])
        means = np.array([[0.0, 0.0], [0.0, 1.0]])
        assert trajectory_loss(means, truth) == pytest.approx(0.625, abs=1e-15)

    def test_degenerate_truth_step_falls_back_to_unnormalized(self):
        truth = np.array([[0.0, 0.0], [3.0, 4.0]])
        means = np.array([[1.0, 0.0], [3.0, 4.0]])
        # first step: truth norm < 1e-8, so the raw squared error (1) counts
        assert trajectory_loss(means, truth) == pytest.approx(0.5, abs=1e-15)

    def test_unnormalized_variant(self):
        truth = np.array([[1.0, 0.0], [0.0, 2.0]])
        means = np.array([[0.0, 0.0], [0.0, 0.0]])
        assert trajectory_loss(means, truth, normalized=False) == pytest.approx(2.5, abs=1e-15)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            trajectory_loss(np.zeros((3, 2)), np.zeros((4, 2)))


class TestBatchLoss:
    def test_value_matches_per_trajectory_replay(self):
        # the batched unroll's loss must equal the mean of per-trajectory
        # losses computed by replaying each trajectory alone with the same
        # noise slices
        system, store, config, truths, observations, v0 = tiny_setup()
        batch, n_steps = observations.shape[:2]
        n = v0.shape[1]
        noise_root = RngStream(99)
        loss, _ = batch_loss_and_grads(
            store, config, system, None, truths, observations, v0,
            noise_root, j0=2, compute_grads=False,
        )
        params_t = store.as_tensors(None)
        per_traj = []
        for b in range(batch):
            v = v0[b : b + 1]
            means = np.zeros((n_steps, system.d_v))
            for jj in range(n_steps):
                rng_cycle = RngStream(99).child(jj)
                xi = rng_cycle.child(0).standard_normal((batch, n, system.d_v)) * system.sigma_v
                eta = rng_cycle.child(1).standard_normal((batch, n, system.d_y)) * system.sigma_y
                out = mnmef_step(
                    v, observations[b : b + 1, jj], system, params_t, config,
                    xi[b : b + 1], eta[b : b + 1],
                )
                v = out.value
                means[jj] = v[0].mean(axis=0)
            per_traj.append(trajectory_loss(means, truths[b, 1:]))
        np.testing.assert_allclose(loss, np.mean(per_traj), rtol=1e-12)

    def test_loss_value_independent_of_truncation_window(self):
        system, store, config, truths, observations, v0 = tiny_setup(n_steps=6)
        losses = []
        for j0 in (1, 2, 3, 6, 50):
            loss, _ = batch_loss_and_grads(
                store, config, system, None, truths, observations, v0,
                RngStream(7), j0=j0, compute_grads=False,
            )
            losses.append(loss)
        np.testing.assert_allclose(losses, losses[0], rtol=1e-12)

    def test_window_of_one_equals_rerooted_single_steps(self):
        # j0=1 gradients must equal the sum over steps of single-step
        # gradients taken with the incoming ensemble frozen at its value
        system, store, config, truths, observations, v0 = tiny_setup(n_steps=3)
        batch, n_steps = observations.shape[:2]
        n = v0.shape[1]
        _, grads = batch_loss_and_grads(
            store, config, system, None, truths, observations, v0,
            RngStream(11), j0=1,
        )

        denom = np.sum(truths[:, 1:] ** 2, axis=-1)
        weights = 1.0 / (n_steps * batch * denom)
        expected = {key: np.zeros_like(val) for key, val in grads.items()}
        v_value = v0
        for jj in range(n_steps):
            tape = ad.Tape()
            tensors = store.as_tensors(tape)
            rng_cycle = RngStream(11).child(jj)
            xi = rng_cycle.child(0).standard_normal((batch, n, system.d_v)) * system.sigma_v
            eta = rng_cycle.child(1).standard_normal((batch, n, system.d_y)) * system.sigma_y
            out = mnmef_step(
                ad.constant(v_value), observations[:, jj], system, tensors, config, xi, eta
            )
            diff = ad.sub(ad.mean_axis(out, axis=1), ad.constant(truths[:, jj + 1]))
            per_traj = ad.sum_axis(ad.mul(diff, diff), axis=1)
            term = ad.sum_axis(ad.mul(per_traj, ad.constant(weights[:, jj])), axis=0)
            tape.backward(term)
            for name, key, _ in store.trainable_arrays():
                expected[(name, key)] += tape.grad(tensors[name][key])
            v_value = out.value
        for key in grads:
            np.testing.assert_allclose(grads[key], expected[key], rtol=1e-10, atol=1e-14)

    def test_truncation_actually_changes_gradients(self):
        system, store, config, truths, observations, v0 = tiny_setup(n_steps=6)
        _, full = batch_loss_and_grads(
            store, config, system, None, truths, observations, v0, RngStream(7), j0=6
        )
        _, short = batch_loss_and_grads(
            store, config, system, None, truths, observations, v0, RngStream(7), j0=1
        )
        gaps = [np.max(np.abs(full[k] - short[k])) for k in full]
        assert max(gaps) > 1e-9

    def test_end_to_end_gradient_matches_finite_differences(self):
        system, store, config, truths, observations, v0 = tiny_setup(
            n_members=4, batch=2, n_steps=2
        )
        _, grads = batch_loss_and_grads(
            store, config, system, None, truths, observations, v0, RngStream(13), j0=2
        )

        def loss_of(st):
            value, _ = batch_loss_and_grads(
                st, config, system, None, truths, observations, v0,
                RngStream(13), j0=2, compute_grads=False,
            )
            return value

        probes = [
            ("gain", "w1", (7, 3)), ("gain", "w3", (1, 9)),
            ("infl", "w1", (5, 40)), ("infl", "b1", (21,)),
            ("st", "nn_in.w1", (12, 2)), ("st", "sab3.att.v", (30, 11)),
            ("st", "pma.seed", (6, 50)), ("st", "nn_out.w1", (40, 500)),
        ]
        eps = 1e-6
        for part, key, idx in probes:
            bumped = store.copy()
            bumped.partitions[part][key][idx] += eps
            up = loss_of(bumped)
            bumped.partitions[part][key][idx] -= 2 * eps
            down = loss_of(bumped)
            numeric = (up - down) / (2 * eps)
            analytic = grads[(part, key)][idx]
            assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(numeric)), (
                part, key, analytic, numeric,
            )


class TestAdamW:
    def _single_param_store(self, value):
        # reuse ParamStore machinery with a one-array fake partition
        return ParamStore({"gain": {"p": np.array(value, dtype=np.float64)}})

    def test_zero_gradient_no_decay_is_identity(self):
        store = self._single_param_store([1.5, -2.0])
        before = store.partitions["gain"]["p"].copy()
        state = OptimizerState(store)
        for _ in range(3):
            adamw_step(state, store, {("gain", "p"): np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(store.partitions["gain"]["p"], before)

    def test_two_steps_match_scalar_recurrence(self):
        store = self._single_param_store([1.0])
        state = OptimizerState(store)
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        gs = [0.5, -0.3]
        p, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        for g in gs:
            adamw_step(state, store, {("gain", "p"): np.array([g])}, lr=lr)
        np.testing.assert_allclose(store.partitions["gain"]["p"], [p], rtol=1e-15)

    def test_constant_gradient_update_approaches_lr(self):
        store = self._single_param_store([0.0])
        state = OptimizerState(store)
        lr = 0.01
        prev = 0.0
        for _ in range(500):
            prev = store.partitions["gain"]["p"][0]
            adamw_step(state, store, {("gain", "p"): np.array([0.3])}, lr=lr)
        last_move = abs(store.partitions["gain"]["p"][0] - prev)
        assert abs(last_move - lr) < 0.02 * lr

    def test_decoupled_weight_decay_is_multiplicative(self):
        store = self._single_param_store([2.0, -4.0])
        state = OptimizerState(store, weight_decay=0.01)
        adamw_step(state, store, {("gain", "p"): np.zeros(2)}, lr=0.5)
        np.testing.assert_allclose(
            store.partitions["gain"]["p"], np.array([2.0, -4.0]) * (1 - 0.5 * 0.01), rtol=1e-15
        )

    def test_frozen_partition_never_moves(self):
        store = ParamStore(
            {"st": {"a": np.ones(3)}, "gain": {"p": np.ones(2)}}, frozen={"st"}
        )
        before = store.partitions["st"]["a"].copy()
        state = OptimizerState(store)
        for _ in range(100):
            adamw_step(state, store, {("gain", "p"): np.full(2, 0.7)}, lr=0.05)
        np.testing.assert_array_equal(store.partitions["st"]["a"], before)
        assert not np.array_equal(store.partitions["gain"]["p"], np.ones(2))

    def test_shape_mismatch_rejected(self):
        store = self._single_param_store([1.0, 2.0])
        state = OptimizerState(store)
        with pytest.raises(ValueError):
            adamw_step(state, store, {("gain", "p"): np.zeros(3)}, lr=0.1)


class TestPretrain:
    def test_smoke_and_determinism(self):
        system = make_system("lorenz63")
        runs = make_runs(system, 8, 3)
        config = TrainConfig(
            n_trajectories=8, n_steps=3, n_members=3, epochs=1, batch_size=4, j0=2, seed=4
        )
        store_a, _, _, hist_a = pretrain(config, system, runs)
        store_b, _, _, hist_b = pretrain(config, system, runs)
        assert len(hist_a) == 1 and np.isfinite(hist_a[0].loss)
        assert hist_a[0].loss == hist_b[0].loss
        for name, arrs in store_a.partitions.items():
            for key, arr in arrs.items():
                np.testing.assert_array_equal(arr, store_b.partitions[name][key])

    def test_insufficient_data_rejected(self):
        system = make_system("lorenz63")
        runs = make_runs(system, 2, 3)
        config = TrainConfig(n_trajectories=8, n_steps=3, epochs=1, batch_size=4)
        with pytest.raises(ValueError):
            pretrain(config, system, runs)

    def test_training_log_csv(self, tmp_path):
        system = make_system("lorenz63")
        runs = make_runs(system, 4, 3)
        config = TrainConfig(
            n_trajectories=4, n_steps=3, n_members=3, epochs=2, batch_size=4, j0=3, seed=1
        )
        _, _, _, history = pretrain(config, system, runs)
        path = tmp_path / "log.csv"
        write_training_log(path, history)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,wall_time_s"
        assert len(lines) == 3
        assert float(lines[1].split(",")[1]) == history[0].loss


class TestFinetune:
    def test_config_derivation(self):
        config = TrainConfig(
            n_trajectories=256, learning_rate=1e-3, epochs=50, finetune_epochs=5
        )
        derived = finetune_config(config, 40)
        assert derived.n_members == 40
        assert derived.n_trajectories == 128
        assert derived.learning_rate == pytest.approx(1e-4)
        assert derived.epochs == 5

    def test_freezes_encoder_and_moves_heads(self):
        system = make_system("lorenz63")
        runs = make_runs(system, 8, 3)
        config = TrainConfig(
            n_trajectories=8, n_steps=3, n_members=3, epochs=1, batch_size=4, j0=3,
            seed=6, finetune_epochs=1,
        )
        pre_store, _, _, _ = pretrain(config, system, runs)
        snapshot = {k: v.copy() for k, v in pre_store.partitions["st"].items()}
        ft_store, ft_cfg, _, history = finetune(pre_store, 5, config, system, runs)
        assert ft_cfg.ensemble_size == 5
        assert np.isfinite(history[0].loss)
        for key, arr in snapshot.items():
            np.testing.assert_array_equal(ft_store.partitions["st"][key], arr)
            # the source store must be untouched too
            np.testing.assert_array_equal(pre_store.partitions["st"][key], arr)
        moved = any(
            not np.array_equal(ft_store.partitions[p][k], pre_store.partitions[p][k])
            for p in ("gain", "infl")
            for k in ft_store.partitions[p]
        )
        assert moved

    def test_paper_scale_config_guard(self):
        config = paper_scale_config("ks")
        assert config.n_trajectories == 8192
        assert config.learning_rate == pytest.approx(5e-4)
        assert config.batch_size == 256
        with pytest.raises(ValueError):
            paper_scale_config("linear")
