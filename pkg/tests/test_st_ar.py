import math

import numpy as np
import pytest
import scipy.stats

from arealbayes import (
    Hyperpriors,
    MCMCConfig,
    ModelError,
    STState,
    fit_quality,
    fit_spatial,
    fit_st,
    grid_graph,
    st_effect_logdensity,
)
from arealbayes.st_ar import (
    ar2_innovations,
    in_stationarity_triangle,
    psi_block_update,
    psi_conditional_moments,
    temporal_rho_update,
)
from arealbayes.synth import SimScenario, generate_st_dataset, sample_car_field

from _oracles import (
    dense_conditional_moments,
    dense_st_logdensity,
    random_connected_graph,
)


class TestStationarityTriangle:
    def test_known_points(self):
        assert in_stationarity_triangle(0.0, 0.0)
        assert in_stationarity_triangle(-0.172, 0.292)
        assert not in_stationarity_triangle(0.6, 0.5)
        assert not in_stationarity_triangle(0.0, 1.0)
        assert not in_stationarity_triangle(-2.0, 0.99)

    def test_innovations_identity_short(self, rng):
        psi = rng.standard_normal((3, 2))
        e = ar2_innovations(psi, 0.4, 0.0)
        assert np.allclose(e[:, 0], psi[:, 0])
        assert np.allclose(e[:, 1], psi[:, 1] - 0.4 * psi[:, 0])


class TestLogDensity:
    def test_dense_oracle_k2_t3(self, path2, rng):
        psi = rng.standard_normal((2, 3))
        ours = st_effect_logdensity(psi, 0.6, -0.2, 0.3, 0.15, path2)
        oracle = dense_st_logdensity(psi, path2, 0.6, -0.2, 0.3, 0.15)
        assert ours == pytest.approx(oracle, abs=1e-8)

    def test_dense_oracle_various_fixtures(self, rng):
        cases = [(2, 3, 0.6, -0.2, 0.3), (3, 5, 0.0, 0.0, 0.0),
                 (5, 4, 0.9, 0.5, -0.3), (2, 30, 0.3, -0.172, 0.292),
                 (10, 6, 0.5, 1.2, -0.5)]
        for K, T, rho_s, r1, r2 in cases:
            g = random_connected_graph(K, rng) if K > 2 else grid_graph(1, 2)
            psi = rng.standard_normal((K, T))
            ours = st_effect_logdensity(psi, rho_s, r1, r2, 0.2, g)
            oracle = dense_st_logdensity(psi, g, rho_s, r1, r2, 0.2)
            assert ours == pytest.approx(oracle, abs=1e-8)

    def test_decoupled_equals_sum_of_car_fields(self, grid33, rng):
        psi = rng.standard_normal((9, 4))
        joint = st_effect_logdensity(psi, 0.5, 0.0, 0.0, 0.2, grid33)
        slices = sum(
            st_effect_logdensity(psi[:, t:t + 1], 0.5, 0.0, 0.0, 0.2, grid33)
            for t in range(4))
        assert joint == pytest.approx(slices, abs=1e-10)

    def test_outside_triangle_error(self, grid33, rng):
        with pytest.raises(ModelError, match="triangle"):
            st_effect_logdensity(rng.standard_normal((9, 3)), 0.5, 0.6, 0.5,
                                 0.2, grid33)

    def test_bad_tau2(self, grid33, rng):
        with pytest.raises(ModelError):
            st_effect_logdensity(rng.standard_normal((9, 3)), 0.5, 0.0, 0.0,
                                 0.0, grid33)


class TestPsiConditional:
    def test_schur_oracle_k2_t5(self, path2, rng):
        K, T = 2, 5
        psi = rng.standard_normal((K, T))
        y = rng.standard_normal((K, T))
        X = np.concatenate([np.ones((K, T, 1)),
                            rng.standard_normal((K, T, 1))], axis=2)
        B = np.array([0.5, -1.0])
        state = STState(B=B, psi=psi, nu2=0.3, tau2=0.2, rho_s=0.6,
                        rho_1t=-0.2, rho_2t=0.3)
        for t in range(T):
            mean, prec = psi_conditional_moments(t, state, y, X, path2)
            o_mean, o_prec = dense_conditional_moments(
                t, psi, y, X, path2, 0.6, -0.2, 0.3, 0.2, 0.3, B)
            assert np.allclose(prec, o_prec, atol=1e-8)
            assert np.allclose(mean, o_mean, atol=1e-8)

    def test_decoupled_matches_spatial_update_moments(self, grid33, rng):
        # rho_1t = rho_2t = 0: the conditional of slice t is the spatial
        # model's joint phi conditional for that slice
        K, T = 9, 3
        psi = rng.standard_normal((K, T))
        y = rng.standard_normal((K, T))
        X = np.ones((K, T, 1))
        B = np.array([0.2])
        state = STState(B=B, psi=psi, nu2=0.3, tau2=0.2, rho_s=0.5,
                        rho_1t=0.0, rho_2t=0.0)
        from arealbayes import leroux_precision
        Q = leroux_precision(grid33, 0.5).toarray()
        t = 1
        mean, prec = psi_conditional_moments(t, state, y, X, grid33)
        expect_prec = Q / 0.2 + np.eye(K) / 0.3
        expect_mean = np.linalg.solve(expect_prec, (y[:, t] - 0.2) / 0.3)
        assert np.allclose(prec, expect_prec, atol=1e-12)
        assert np.allclose(mean, expect_mean, atol=1e-12)

    def test_prior_conditional_when_likelihood_off(self, path2, rng):
        K, T = 2, 4
        psi = rng.standard_normal((K, T))
        state = STState(B=np.zeros(1), psi=psi, nu2=1.0, tau2=0.2, rho_s=0.6,
                        rho_1t=0.3, rho_2t=0.1)
        y = np.zeros((K, T))
        X = np.zeros((K, T, 1))
        mean, prec = psi_conditional_moments(1, state, y, X, path2,
                                             include_likelihood=False)
        o_mean, o_prec = dense_conditional_moments(
            1, psi, y, X, path2, 0.6, 0.3, 0.1, 0.2, np.inf, np.zeros(1))
        # oracle with nu2 = inf drops the likelihood terms
        assert np.allclose(prec, o_prec - 0.0, atol=1e-8)
        assert np.allclose(mean, o_mean, atol=1e-8)

    def test_block_update_draws_have_conditional_moments(self, path2, rng):
        K, T = 2, 3
        psi = rng.standard_normal((K, T))
        y = rng.standard_normal((K, T))
        X = np.ones((K, T, 1))
        state = STState(B=np.array([0.1]), psi=psi, nu2=0.4, tau2=0.3,
                        rho_s=0.5, rho_1t=0.2, rho_2t=0.1)
        mean, prec = psi_conditional_moments(1, state, y, X, path2)
        cov = np.linalg.inv(prec)
        draws = np.array([psi_block_update(1, state, y, X, path2, rng)
                          for _ in range(20000)])
        assert np.allclose(draws.mean(axis=0), mean, atol=4 * np.sqrt(
            np.diag(cov) / 20000) + 1e-12)
        assert np.allclose(np.cov(draws.T), cov, atol=0.05 * np.abs(cov).max())


class TestTemporalRhoUpdate:
    def test_t_too_small(self, path2, rng):
        state = STState(B=np.zeros(1), psi=rng.standard_normal((2, 2)),
                        nu2=0.1, tau2=0.1, rho_s=0.5, rho_1t=0.0, rho_2t=0.0)
        with pytest.raises(ModelError, match="T=2"):
            temporal_rho_update(state, path2, rng)

    def test_zero_psi_uniform_over_triangle(self, path2):
        rng = np.random.default_rng(3)
        state = STState(B=np.zeros(1), psi=np.zeros((2, 8)), nu2=0.1,
                        tau2=0.1, rho_s=0.5, rho_1t=0.0, rho_2t=0.0)
        draws = np.array([temporal_rho_update(state, path2, rng)
                          for _ in range(3000)])
        assert all(in_stationarity_triangle(r1, r2) for r1, r2 in draws)
        # KS against a direct uniform-triangle oracle
        from arealbayes.st_ar import _triangle_uniform
        oracle = np.array([_triangle_uniform(rng) for _ in range(3000)])
        assert scipy.stats.ks_2samp(draws[:, 0], oracle[:, 0]).pvalue > 0.01
        assert scipy.stats.ks_2samp(draws[:, 1], oracle[:, 1]).pvalue > 0.01

    def test_identical_slices_near_unit_root_boundary(self, path2):
        rng = np.random.default_rng(4)
        base = np.array([1.0, -2.0])
        psi = np.repeat(base[:, None], 12, axis=1)
        state = STState(B=np.zeros(1), psi=psi, nu2=0.1, tau2=1e-4,
                        rho_s=0.5, rho_1t=0.0, rho_2t=0.0)
        draws = np.array([temporal_rho_update(state, path2, rng)
                          for _ in range(300)])
        sums = draws.sum(axis=1)
        assert all(in_stationarity_triangle(r1, r2) for r1, r2 in draws)
        assert np.mean(sums > 0.9) > 0.95  # concentrates at rho1+rho2 = 1

    def test_recovery_at_table_operating_point(self):
        rng = np.random.default_rng(11)
        g = grid_graph(2, 5)
        r1_true, r2_true = -0.17, 0.29
        tau2, rho_s = 0.15, 0.6
        T = 365
        innov = sample_car_field(g, rho_s, tau2, rng, size=T)
        psi = np.empty((10, T))
        psi[:, 0] = innov[0]
        psi[:, 1] = r1_true * psi[:, 0] + innov[1]
        for t in range(2, T):
            psi[:, t] = (r1_true * psi[:, t - 1] + r2_true * psi[:, t - 2]
                         + innov[t])
        state = STState(B=np.zeros(1), psi=psi, nu2=0.1, tau2=tau2,
                        rho_s=rho_s, rho_1t=0.0, rho_2t=0.0)
        draws = np.array([temporal_rho_update(state, g, rng)
                          for _ in range(400)])
        assert abs(draws[:, 0].mean() - r1_true) < 0.05
        assert abs(draws[:, 1].mean() - r2_true) < 0.05


class TestFitST:
    def test_t1_exactly_matches_spatial(self):
        g = grid_graph(3, 3)
        rng = np.random.default_rng(0)
        y = rng.standard_normal(9)
        X = np.column_stack([np.ones(9), rng.standard_normal(9)])
        cfg = MCMCConfig(n_iterations=400, burn_in=100, thin=3, seed=7)
        sp = fit_spatial(y, X, g, config=cfg)
        st = fit_st(y, X, g, config=cfg)
        assert np.array_equal(st.B, sp.beta)
        assert np.array_equal(st.nu2, sp.nu2)
        assert np.array_equal(st.tau2, sp.tau2)
        assert np.array_equal(st.rho_s, sp.rho)
        assert np.array_equal(np.asarray(st.loglik), sp.loglik)
        assert np.all(st.rho_1t == 0.0) and np.all(st.rho_2t == 0.0)

    def test_deterministic(self):
        g = grid_graph(3, 3)
        y, X, _ = generate_st_dataset(
            SimScenario(graph=g, beta=np.array([1.0, 0.3]), nu2=0.1,
                        tau2=0.15, rho=0.5, T=5, rho_1t=-0.1, rho_2t=0.2,
                        seed=2))
        cfg = MCMCConfig(n_iterations=200, burn_in=50, thin=2, seed=1)
        f1 = fit_st(y, X, g, config=cfg)
        f2 = fit_st(y, X, g, config=cfg)
        assert np.array_equal(f1.B, f2.B)
        assert np.array_equal(f1.rho_1t, f2.rho_1t)
        assert np.array_equal(np.asarray(f1.loglik), np.asarray(f2.loglik))

    def test_loglik_rows_match_deviance(self):
        g = grid_graph(3, 3)
        y, X, _ = generate_st_dataset(
            SimScenario(graph=g, beta=np.array([1.0]), nu2=0.1, tau2=0.15,
                        rho=0.5, T=4, seed=3))
        fit = fit_st(y, X, g, config=MCMCConfig(n_iterations=150, burn_in=50,
                                                thin=2, seed=0))
        sums = np.asarray(fit.loglik).sum(axis=1)
        assert np.allclose(fit.deviances(), -2.0 * sums, atol=1e-10)

    def test_psi_centered_via_intercept(self):
        g = grid_graph(3, 3)
        y, X, _ = generate_st_dataset(
            SimScenario(graph=g, beta=np.array([2.0]), nu2=0.1, tau2=0.15,
                        rho=0.5, T=4, seed=4))
        fit = fit_st(y, X, g, config=MCMCConfig(n_iterations=200, burn_in=100,
                                                thin=1, seed=0))
        assert abs(fit.psi_mean.mean()) < 1e-9

    def test_freeze_temporal(self):
        g = grid_graph(3, 3)
        y, X, _ = generate_st_dataset(
            SimScenario(graph=g, beta=np.array([1.0]), nu2=0.1, tau2=0.15,
                        rho=0.5, T=5, rho_1t=-0.1, rho_2t=0.2, seed=5))
        fit = fit_st(y, X, g, config=MCMCConfig(n_iterations=150, burn_in=50,
                                                thin=2, seed=0),
                     freeze_temporal=True)
        assert np.all(fit.rho_1t == 0.0) and np.all(fit.rho_2t == 0.0)

    def test_memmap_loglik_path(self, tmp_path):
        g = grid_graph(2, 3)
        y, X, _ = generate_st_dataset(
            SimScenario(graph=g, beta=np.array([1.0]), nu2=0.1, tau2=0.15,
                        rho=0.5, T=4, seed=6))
        path = tmp_path / "ll.npy"
        fit = fit_st(y, X, g, config=MCMCConfig(n_iterations=120, burn_in=40,
                                                thin=2, seed=0),
                     loglik_path=path)
        assert path.exists()
        assert isinstance(fit.loglik, np.memmap)
        on_disk = np.load(path)
        assert np.array_equal(on_disk, np.asarray(fit.loglik))

    def test_dimension_mismatch(self, grid33):
        with pytest.raises(ModelError, match="mismatch"):
            fit_st(np.zeros((5, 3)), np.ones((5, 3, 1)), grid33)


class TestFitQuality:
    def test_identity(self):
        g = grid_graph(2, 3)
        y, X, _ = generate_st_dataset(
            SimScenario(graph=g, beta=np.array([1.0]), nu2=0.1, tau2=0.15,
                        rho=0.5, T=4, seed=7))
        fit = fit_st(y, X, g, config=MCMCConfig(n_iterations=120, burn_in=40,
                                                thin=2, seed=0))
        fit.fitted_mean = y.copy()
        r, slope = fit_quality(fit, y)
        assert r == pytest.approx(1.0)
        assert slope == pytest.approx(1.0)

    def test_shuffled_fitted_loses_association(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            actual = rng.standard_normal(500)
            fitted = actual.copy()
            rng.shuffle(fitted)
            r = float(np.corrcoef(actual, fitted)[0, 1])
            hits += abs(r) < 0.1
        assert hits >= 95
