"""Filter tests: hand-worked gain cases, square-root identities, local-vs-global
transform equivalence, Gauss-Newton convergence, and quadrature oracles."""

import numpy as np
import pytest

from ensda.dynamics import linear_rotation, rotation_matrix
from ensda.filters import (
    KalmanBelief,
    LocalizationSpec,
    apply_inflation,
    enkf_analysis,
    ensemble_mean,
    esrf_analysis,
    gaspari_cohn,
    ienkf_analysis,
    kalman_predict,
    kalman_step,
    kalman_update,
    letkf_analysis,
    periodic_distance,
)
from ensda.numerics import RngStream


def subsample(indices):
    idx = np.asarray(indices)
    return lambda v: v[:, idx]


class TestGaspariCohn:
    def test_endpoint_values(self):
        assert gaspari_cohn(0.0) == 1.0
        assert gaspari_cohn(2.0) == 0.0
        assert gaspari_cohn(3.7) == 0.0

    def test_value_at_one_matches_polynomial(self):
        # Inner piece at r=1: -1/4 + 1/2 + 5/8 - 5/3 + 1 = 5/24.
        np.testing.assert_allclose(gaspari_cohn(1.0), 5.0 / 24.0, rtol=1e-14)

    def test_monotone_and_continuous(self):
        r = np.linspace(0.0, 2.2, 10_000)
        g = gaspari_cohn(r)
        assert np.all(np.diff(g) <= 1e-12)
        assert np.all(g >= 0.0) and np.all(g <= 1.0)
        jumps = np.abs(np.diff(g))
        assert jumps.max() < 1e-2  # no discontinuity at the piece boundaries

    def test_periodic_distance(self):
        assert periodic_distance(0, 39, 40) == 1
        assert periodic_distance(5, 25, 40) == 20
        np.testing.assert_array_equal(periodic_distance(0, np.array([1, 20, 39]), 40), [1, 20, 1])


class TestInflation:
    def setup_method(self):
        self.v = np.random.default_rng(1).standard_normal((7, 4))

    def test_alpha_one_is_identity(self):
        np.testing.assert_array_equal(apply_inflation(self.v, 1.0), self.v)

    def test_mean_preserved(self):
        out = apply_inflation(self.v, 1.7)
        np.testing.assert_allclose(ensemble_mean(out), ensemble_mean(self.v), atol=1e-12)

    def test_alpha_two_quadruples_covariance(self):
        out = apply_inflation(self.v, 2.0)
        cov = lambda e: (e - e.mean(0)).T @ (e - e.mean(0)) / e.shape[0]
        np.testing.assert_allclose(cov(out), 4.0 * cov(self.v), rtol=1e-12)

    def test_rejects_deflation(self):
        with pytest.raises(ValueError):
            apply_inflation(self.v, 0.9)


class TestEnKF:
    def test_zero_spread_is_fixed_point(self):
        v = np.tile([1.0, 2.0], (5, 1))
        out = enkf_analysis(v, np.array([3.0]), subsample([0]), np.eye(1), RngStream(0, 0))
        np.testing.assert_array_equal(out, v)

    def test_uninformative_observations_leave_forecast(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal((20, 3))
        gamma = 1e8 * np.eye(1)
        # Gain term alone: K ~ 1/Gamma makes the shift O(1e-8).
        out = enkf_analysis(v, np.array([5.0]), subsample([1]), gamma, obs_noise=np.zeros((20, 1)))
        np.testing.assert_allclose(out, v, rtol=1e-6, atol=1e-6)
        # With drawn perturbations the residual shift is O(Gamma^{-1/2}).
        out = enkf_analysis(v, np.array([5.0]), subsample([1]), gamma, RngStream(1, 0))
        np.testing.assert_allclose(out, v, rtol=1e-3, atol=1e-3)

    def test_three_member_case_matches_formula_oracle(self):
        # Brute-force evaluation of the update on a tiny hand case.
        v = np.array([[1.0, 0.0], [2.0, 1.0], [0.0, -1.0]])
        y = np.array([1.5])
        gamma = np.array([[0.5]])
        h = subsample([0])
        eta = RngStream(9, 0).standard_normal((3, 1)) @ np.linalg.cholesky(gamma).T

        n = 3
        mean = v.sum(0) / n
        hv = v[:, :1]
        h_mean = hv.sum(0) / n
        c_vh = sum((v[i] - mean)[:, None] * (hv[i] - h_mean)[None, :] for i in range(n)) / n
        c_hh = sum((hv[i] - h_mean)[:, None] * (hv[i] - h_mean)[None, :] for i in range(n)) / n
        gain = c_vh @ np.linalg.inv(c_hh + gamma)
        expected = np.stack([v[i] + gain @ (y - hv[i] - eta[i]) for i in range(n)])

        got = enkf_analysis(v, y, h, gamma, RngStream(9, 0))
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((8, 4))
        y = np.array([0.3, -0.2])
        gamma = 0.25 * np.eye(2)
        noise = rng.standard_normal((8, 2)) * 0.5
        perm = np.array([5, 2, 7, 0, 1, 6, 3, 4])
        base = enkf_analysis(v, y, subsample([0, 2]), gamma, obs_noise=noise)
        shuffled = enkf_analysis(v[perm], y, subsample([0, 2]), gamma, obs_noise=noise[perm])
        # Permuting members reorders the covariance summations, so equality
        # holds to rounding rather than bitwise.
        np.testing.assert_allclose(shuffled, base[perm], rtol=1e-12, atol=1e-14)

    def test_localized_gain_matches_hadamard_oracle(self):
        rng = np.random.default_rng(4)
        d_v, n = 12, 6
        obs_idx = np.array([0, 4, 8])
        v = rng.standard_normal((n, d_v))
        y = rng.standard_normal(3)
        gamma = np.eye(3)
        noise = rng.standard_normal((n, 3))
        loc = LocalizationSpec(radius=2.0, d_state=d_v)

        mean = v.mean(0)
        hv = v[:, obs_idx]
        h_mean = hv.mean(0)
        c_vh = (v - mean).T @ (hv - h_mean) / n
        c_hh = (hv - h_mean).T @ (hv - h_mean) / n
        scale = 2.0 * np.sqrt(10.0 / 3.0)
        l_vh = np.empty((d_v, 3))
        l_hh = np.empty((3, 3))
        for k in range(d_v):
            for j, o in enumerate(obs_idx):
                l_vh[k, j] = gaspari_cohn(min(abs(k - o), d_v - abs(k - o)) / scale)
        for i, oi in enumerate(obs_idx):
            for j, oj in enumerate(obs_idx):
                l_hh[i, j] = gaspari_cohn(min(abs(oi - oj), d_v - abs(oi - oj)) / scale)
        gain = (c_vh * l_vh) @ np.linalg.inv(c_hh * l_hh + gamma)
        expected = v + (y - hv - noise) @ gain.T

        got = enkf_analysis(
            v, y, subsample(obs_idx), gamma, loc=loc, obs_indices=obs_idx, obs_noise=noise
        )
        np.testing.assert_allclose(got, expected, atol=1e-10)


class TestESRF:
    def _setup(self, n=16, d=5, seed=7):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((n, d)) @ np.diag([1.0, 2.0, 0.5, 1.5, 1.0]) + rng.standard_normal(d)
        obs_idx = np.array([0, 2])
        return v, obs_idx, np.diag([0.4, 0.9]), rng.standard_normal(2)

    def test_covariance_matches_kalman_identity(self):
        v, obs_idx, gamma, y = self._setup()
        n = v.shape[0]
        out = esrf_analysis(v, y, subsample(obs_idx), gamma)
        c_fore = (v - v.mean(0)).T @ (v - v.mean(0)) / n
        h = np.zeros((2, 5))
        h[0, obs_idx[0]] = h[1, obs_idx[1]] = 1.0
        gain = c_fore @ h.T @ np.linalg.inv(h @ c_fore @ h.T + gamma)
        expected_cov = (np.eye(5) - gain @ h) @ c_fore
        got_cov = (out - out.mean(0)).T @ (out - out.mean(0)) / n
        np.testing.assert_allclose(got_cov, expected_cov, atol=1e-10)
        expected_mean = v.mean(0) + gain @ (y - v.mean(0)[obs_idx])
        np.testing.assert_allclose(out.mean(0), expected_mean, atol=1e-10)

    def test_zero_spread_unchanged(self):
        v = np.tile([0.5, -1.0, 2.0, 0.0, 3.0], (6, 1))
        out = esrf_analysis(v, np.array([1.0, 1.0]), subsample([0, 2]), np.eye(2))
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_deterministic(self):
        v, obs_idx, gamma, y = self._setup()
        a = esrf_analysis(v, y, subsample(obs_idx), gamma)
        b = esrf_analysis(v, y, subsample(obs_idx), gamma)
        np.testing.assert_array_equal(a, b)

    def test_large_ensemble_matches_kalman_oracle(self):
        rng = np.random.default_rng(11)
        m0 = np.array([1.0, -0.5])
        c0 = np.array([[1.0, 0.3], [0.3, 0.6]])
        v = rng.multivariate_normal(m0, c0, size=512)
        h = np.array([[1.0, 0.0]])
        gamma = np.array([[0.5]])
        y = np.array([0.7])
        out = esrf_analysis(v, y, lambda e: e @ h.T, gamma)
        # Exact conditioning of the *empirical* Gaussian:
        n = 512
        emp_mean = v.mean(0)
        emp_cov = (v - emp_mean).T @ (v - emp_mean) / n
        updated = kalman_update(KalmanBelief(emp_mean, emp_cov), h, gamma, y)
        got_cov = (out - out.mean(0)).T @ (out - out.mean(0)) / n
        np.testing.assert_allclose(out.mean(0), updated.mean, atol=1e-10)
        np.testing.assert_allclose(got_cov, updated.cov, atol=1e-10)


class TestLETKF:
    def _ensemble(self, n=10, d=40, seed=5):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((n, d))
        obs_idx = np.arange(0, d, 4)
        y = rng.standard_normal(obs_idx.size)
        return v, obs_idx, np.eye(obs_idx.size), y

    def test_infinite_radius_matches_global_transform(self):
        v, obs_idx, gamma, y = self._ensemble()
        loc = LocalizationSpec(radius=1e6, d_state=40)
        local = letkf_analysis(v, y, obs_idx, gamma, loc)
        global_ = esrf_analysis(v, y, subsample(obs_idx), gamma)
        np.testing.assert_allclose(local, global_, atol=1e-8)

    def test_unobserved_coordinates_keep_forecast_at_tiny_radius(self):
        v, obs_idx, gamma, y = self._ensemble()
        loc = LocalizationSpec(radius=0.2, d_state=40)  # support < 1 grid point
        out = letkf_analysis(v, y, obs_idx, gamma, loc)
        unobserved = np.setdiff1d(np.arange(40), obs_idx)
        np.testing.assert_array_equal(out[:, unobserved], v[:, unobserved])
        assert not np.allclose(out[:, obs_idx], v[:, obs_idx])

    def test_zero_spread_unchanged(self):
        v = np.tile(np.arange(40.0), (6, 1))
        obs_idx = np.arange(0, 40, 4)
        out = letkf_analysis(v, np.zeros(10), obs_idx, np.eye(10), LocalizationSpec(2.0, 40))
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_internal_inflation_equals_post_inflation(self):
        v, obs_idx, gamma, y = self._ensemble()
        loc = LocalizationSpec(radius=2.0, d_state=40)
        inside = letkf_analysis(v, y, obs_idx, gamma, loc, inflation=1.3)
        outside = apply_inflation(letkf_analysis(v, y, obs_idx, gamma, loc), 1.3)
        np.testing.assert_allclose(inside, outside, rtol=1e-10, atol=1e-12)

    def test_rejects_nondiagonal_gamma(self):
        v, obs_idx, gamma, y = self._ensemble()
        gamma[0, 1] = 0.2
        gamma[1, 0] = 0.2
        with pytest.raises(ValueError):
            letkf_analysis(v, y, obs_idx, gamma, LocalizationSpec(2.0, 40))


class TestIEnKF:
    def test_linear_one_dim_matches_explicit_formula(self):
        # Oracle: transcribe the single Gauss-Newton step that is exact for
        rng = np.random.default_rng(13)
        n, a, gamma_val = 4, 0.8, 0.5
        prev = rng.standard_normal((n, 1)) * 1.2 + 0.4
        y = np.array([1.0])

        mean = prev.sum(0) / n
        anom = prev - mean
        y_sens = a * anom  # linear step then identity observation
        delta = y - a * mean
        hess = n * np.eye(n) + (y_sens @ y_sens.T) / gamma_val
        w = np.linalg.solve(hess, (y_sens @ delta) / gamma_val)
        vals, vecs = np.linalg.eigh(hess)
        transform = np.sqrt(n) * (vecs / np.sqrt(vals)) @ vecs.T
        expected = a * (mean[None, :] + w @ anom + transform @ anom)

        got, info = ienkf_analysis(
            prev,
            step=lambda e: a * e,
            h=lambda e: e,
            gamma=np.array([[gamma_val]]),
            y=y,
            return_info=True,
        )
        assert info["n_iters"] == 2  # second sweep only certifies convergence
        np.testing.assert_allclose(got, expected, atol=1e-9)

    def test_linear_multidim_matches_square_root_filter(self):
        rng = np.random.default_rng(17)
        rot = rotation_matrix()
        prev = rng.standard_normal((12, 10))
        obs_idx = np.array([0, 2, 4, 6, 8])
        y = rng.standard_normal(5)
        gamma = np.eye(5)
        got = ienkf_analysis(prev, lambda e: e @ rot.T, subsample(obs_idx), gamma, y)
        ref = esrf_analysis(prev @ rot.T, y, subsample(obs_idx), gamma)
        np.testing.assert_allclose(got.mean(0), ref.mean(0), atol=1e-9)
        got_cov = np.cov(got.T, bias=True)
        ref_cov = np.cov(ref.T, bias=True)
        np.testing.assert_allclose(got_cov, ref_cov, atol=1e-9)

    def test_huge_tolerance_returns_after_one_sweep(self):
        prev = np.random.default_rng(0).standard_normal((5, 2))
        _, info = ienkf_analysis(
            prev,
            lambda e: e,
            subsample([0]),
            np.eye(1),
            np.array([0.5]),
            tol=1e9,
            return_info=True,
        )
        assert info["n_iters"] == 1

    def test_zero_max_iter_rejected(self):
        prev = np.zeros((3, 2))
        with pytest.raises(ValueError):
            ienkf_analysis(prev, lambda e: e, subsample([0]), np.eye(1), np.array([0.0]), max_iter=0)


class TestKalman:
    def test_one_dim_riccati_hand_values(self):
        # A=0.9, C0=1, Sigma=0.5, Gamma=2, y=1 worked by hand:
        # predict: m=0, C = 0.81 + 0.5 = 1.31
        # gain: 1.31/3.31; mean: 1.31/3.31; cov: 2*1.31/3.31
        belief = KalmanBelief(np.array([0.0]), np.array([[1.0]]))
        out = kalman_step(
            belief,
            a=np.array([[0.9]]),
            h=np.array([[1.0]]),
            sigma=np.array([[0.5]]),
            gamma=np.array([[2.0]]),
            y=np.array([1.0]),
        )
        np.testing.assert_allclose(out.mean, [1.31 / 3.31], rtol=1e-12)
        np.testing.assert_allclose(out.cov, [[2.0 * 1.31 / 3.31]], rtol=1e-12)

    def test_uninformative_observation_keeps_predict(self):
        belief = KalmanBelief(np.array([1.0, -1.0]), np.eye(2))
        a = np.array([[0.0, 1.0], [-1.0, 0.0]])
        predicted = kalman_predict(belief, a, 0.1 * np.eye(2))
        out = kalman_step(belief, a, np.eye(2), 0.1 * np.eye(2), 1e12 * np.eye(2), np.array([5.0, 5.0]))
        np.testing.assert_allclose(out.mean, predicted.mean, atol=1e-9)
        np.testing.assert_allclose(out.cov, predicted.cov, rtol=1e-9)

    def test_perfect_observation_pins_mean(self):
        belief = KalmanBelief(np.zeros(2), np.eye(2))
        y = np.array([2.0, -3.0])
        out = kalman_update(belief, np.eye(2), 1e-12 * np.eye(2), y)
        np.testing.assert_allclose(out.mean, y, atol=1e-9)

    def test_two_dim_matches_grid_quadrature_posterior(self):
        m = np.array([0.5, -0.2])
        c = np.array([[0.8, 0.25], [0.25, 0.5]])
        h = np.array([[1.0, 0.4]])
        gamma = np.array([[0.3]])
        y = np.array([1.1])
        out = kalman_update(KalmanBelief(m, c), h, gamma, y)

        span = np.linspace(-5.0, 5.0, 801)
        gx, gy = np.meshgrid(m[0] + span, m[1] + span, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        diff = pts - m
        cinv = np.linalg.inv(c)
        log_prior = -0.5 * np.einsum("ni,ij,nj->n", diff, cinv, diff)
        resid = y[0] - pts @ h[0]
        log_like = -0.5 * resid**2 / gamma[0, 0]
        w = np.exp(log_prior + log_like - (log_prior + log_like).max())
        w /= w.sum()
        quad_mean = w @ pts
        np.testing.assert_allclose(out.mean, quad_mean, atol=1e-3)


class TestMeanFieldConsistency:
    def test_large_ensemble_enkf_tracks_exact_filter(self):
        # 50 assimilation steps of the linear rotation benchmark with N=1024:
        # the stochastic analysis mean/cov stay within 5% of the exact filter.
        sys = linear_rotation()
        rot = rotation_matrix()
        n, d = 1024, 10
        rng = RngStream(123, 0)
        truth_rng = RngStream(123, 1)

        v_true = truth_rng.standard_normal((d,))
        ens = v_true[None, :] + rng.standard_normal((n, d))
        belief = KalmanBelief(v_true.copy(), np.eye(d))
        h_mat = np.zeros((5, d))
        h_mat[np.arange(5), sys.obs_indices] = 1.0
        gamma = sys.gamma()
        sigma = sys.sigma_v**2 * np.eye(d)

        mean_errs, cov_errs = [], []
        emp_cov_sum = np.zeros((d, d))
        exact_cov_sum = np.zeros((d, d))
        for _ in range(50):
            v_true = rot @ v_true + sys.sigma_v * truth_rng.standard_normal((d,))
            y = v_true[sys.obs_indices] + truth_rng.standard_normal((5,))
            ens = ens @ rot.T + sys.sigma_v * rng.standard_normal((n, d))
            ens = enkf_analysis(ens, y, lambda e: e[:, sys.obs_indices], gamma, rng)
            belief = kalman_step(belief, rot, h_mat, sigma, gamma, y)
            emp_cov = np.cov(ens.T, bias=True)
            emp_cov_sum += emp_cov
            exact_cov_sum += belief.cov
            mean_errs.append(
                np.linalg.norm(ens.mean(0) - belief.mean) / np.linalg.norm(belief.mean)
            )
            cov_errs.append(
                np.linalg.norm(emp_cov - belief.cov) / np.linalg.norm(belief.cov)
            )
        assert np.mean(mean_errs) < 0.05
        # Per-step Frobenius error is dominated by O(sqrt(d^2/N)) ~ 10%
        # sampling noise; the time-averaged covariance must be within 5%.
        assert np.mean(cov_errs) < 0.15
        avg_err = np.linalg.norm(emp_cov_sum - exact_cov_sum) / np.linalg.norm(exact_cov_sum)
        assert avg_err < 0.05
