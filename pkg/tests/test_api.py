"""Tests for the assimilation runner and the estimator front end."""

import numpy as np
import pytest

from ensda.dynamics import generate_truth, make_system
from ensda.filters import ESRF, LETKF, MNMEF, EnKF, IEnKF, run_assimilation
from ensda.learned import MnmefConfig, ParamStore
from ensda.numerics import RngStream


@pytest.fixture(scope="module")
def linear_setup():
    system = make_system("linear")
    truth = generate_truth(system, 30, RngStream(8))
    return system, truth


class TestRunner:
    def test_unknown_method_rejected(self, linear_setup):
        system, truth = linear_setup
        with pytest.raises(ValueError):
            run_assimilation("kalman", system, truth, 10, seed=0)

    def test_letkf_requires_radius(self, linear_setup):
        system, truth = linear_setup
        with pytest.raises(ValueError):
            run_assimilation("letkf", system, truth, 10, seed=0)

    def test_mnmef_requires_model(self, linear_setup):
        system, truth = linear_setup
        with pytest.raises(ValueError):
            run_assimilation("mnmef", system, truth, 10, seed=0)

    def test_determinism(self, linear_setup):
        system, truth = linear_setup
        a = run_assimilation("enkf", system, truth, 10, seed=3)
        b = run_assimilation("enkf", system, truth, 10, seed=3)
        np.testing.assert_array_equal(a.means, b.means)
        c = run_assimilation("enkf", system, truth, 10, seed=4)
        assert not np.array_equal(a.means, c.means)

    def test_zero_head_learned_filter_matches_enkf_run(self, linear_setup):
        # same seed, same noise schedule: the untrained learned filter and the
        # stochastic EnKF must produce the same run
        system, truth = linear_setup
        config = MnmefConfig.for_system(system, 10)
        store = ParamStore.init(RngStream(0), config, None)
        a = run_assimilation("enkf", system, truth, 10, seed=5)
        b = run_assimilation("mnmef", system, truth, 10, seed=5, model=(store, config, None))
        np.testing.assert_allclose(b.means, a.means, rtol=0, atol=1e-10)

    def test_all_methods_complete(self, linear_setup):
        system, truth = linear_setup
        for method, kwargs in [
            ("enkf", {}),
            ("esrf", {}),
            ("letkf", {"loc_radius": 2.0}),
            ("ienkf", {}),
        ]:
            record = run_assimilation(method, system, truth, 8, seed=6, **kwargs)
            assert not record.diverged
            assert record.n_steps_completed == truth.n_steps
            assert np.all(np.isfinite(record.means))

    def test_divergence_is_flagged_not_raised(self, linear_setup):
        system, truth = linear_setup
        # absurd process noise overflows the forecast covariance immediately
        noisy = system.with_noise(sigma_v=1e200)
        with np.errstate(over="ignore", invalid="ignore"):
            record = run_assimilation("enkf", noisy, truth, 8, seed=7)
        assert record.diverged
        assert record.n_steps_completed < truth.n_steps
        assert np.all(np.isnan(record.means[record.n_steps_completed :]))

    def test_collect_ensembles(self, linear_setup):
        system, truth = linear_setup
        record = run_assimilation("enkf", system, truth, 6, seed=9, collect_ensembles=True)
        assert record.ensembles.shape == (truth.n_steps, 6, system.d_v)
        np.testing.assert_allclose(record.ensembles.mean(axis=1), record.means, rtol=0, atol=1e-15)

    def test_inflation_changes_enkf_run(self, linear_setup):
        system, truth = linear_setup
        a = run_assimilation("enkf", system, truth, 10, seed=3)
        b = run_assimilation("enkf", system, truth, 10, seed=3, inflation=1.2)
        assert not np.array_equal(a.means, b.means)


class TestEstimators:
    def test_fit_predict_matches_runner(self, linear_setup):
        system, truth = linear_setup
        est = EnKF(n_members=10, seed=3).fit(truth, system)
        reference = run_assimilation("enkf", system, truth, 10, seed=3)
        np.testing.assert_array_equal(est.predict(), reference.means)

    def test_predict_before_fit_rejected(self):
        with pytest.raises(RuntimeError):
            EnKF().predict()

    def test_get_set_params_roundtrip(self):
        est = LETKF(n_members=12, inflation=1.1, loc_radius=3.0, seed=5)
        params = est.get_params()
        assert params == {"n_members": 12, "inflation": 1.1, "loc_radius": 3.0, "seed": 5}
        est.set_params(inflation=1.05)
        assert est.inflation == 1.05
        with pytest.raises(ValueError):
            est.set_params(bogus=1)

    def test_each_estimator_runs(self, linear_setup):
        system, truth = linear_setup
        config = MnmefConfig.for_system(system, 6)
        store = ParamStore.init(RngStream(1), config, None)
        estimators = [
            EnKF(n_members=6, seed=2),
            ESRF(n_members=6, seed=2),
            LETKF(n_members=6, loc_radius=2.0, seed=2),
            IEnKF(n_members=6, seed=2),
            MNMEF(store=store, config=config, n_members=6, seed=2),
        ]
        for est in estimators:
            means = est.fit(truth, system).predict()
            assert means.shape == (truth.n_steps, system.d_v)
            assert np.all(np.isfinite(means))

    def test_mnmef_estimator_requires_model(self, linear_setup):
        system, truth = linear_setup
        with pytest.raises(ValueError):
            MNMEF(n_members=6).fit(truth, system)
