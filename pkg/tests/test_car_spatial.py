import math

import numpy as np
import pytest
import scipy.stats

from arealbayes import (
    ArealGraph,
    Hyperpriors,
    LerouxState,
    MCMCConfig,
    ModelError,
    fit_spatial,
    fitted_and_residuals,
    grid_graph,
    leroux_precision,
)
from arealbayes.car_spatial import (
    StepAdapter,
    beta_full_conditional,
    check_full_rank,
    phi_gibbs_sweep,
    rho_log_target,
    rho_metropolis_step,
    variance_full_conditionals,
)
from arealbayes.graph import laplacian_eigenvalues
from arealbayes.synth import SimScenario, generate_spatial_dataset

from _oracles import dense_leroux_precision, random_connected_graph


def make_state(graph, rng, rho=0.5, tau2=0.2, nu2=0.1, p=1):
    return LerouxState(beta=rng.standard_normal(p),
                       phi=rng.standard_normal(graph.n_units),
                       nu2=nu2, tau2=tau2, rho=rho)


class TestLerouxPrecision:
    def test_rho_zero_identity(self, grid33):
        Q = leroux_precision(grid33, 0.0).toarray()
        assert np.array_equal(Q, np.eye(9))

    def test_rho_one_laplacian(self, grid33):
        Q = leroux_precision(grid33, 1.0).toarray()
        L = np.diag(grid33.degrees.astype(float)) - grid33.adjacency_matrix()
        assert np.array_equal(Q, L)

    def test_two_node_path_half(self, path2):
        Q = leroux_precision(path2, 0.5).toarray()
        assert np.allclose(Q, [[1.0, -0.5], [-0.5, 1.0]])

    def test_matches_dense_formula(self, rng):
        for _ in range(10):
            g = random_connected_graph(int(rng.integers(2, 25)), rng)
            rho = float(rng.uniform())
            assert np.allclose(leroux_precision(g, rho).toarray(),
                               dense_leroux_precision(g, rho), atol=1e-14)

    def test_positive_definite_below_one(self, rng):
        g = random_connected_graph(15, rng)
        for rho in (0.0, 0.3, 0.9, 0.999):
            vals = np.linalg.eigvalsh(leroux_precision(g, rho).toarray())
            assert vals.min() > 0
            assert vals.min() == pytest.approx(1.0 - rho, rel=1e-8)

    def test_rho_out_of_range(self, grid33):
        with pytest.raises(ModelError):
            leroux_precision(grid33, 1.5)


class TestBetaConditional:
    def test_closed_form_small_fixture(self, path2, rng):
        y = np.array([1.0, 2.0])
        X = np.array([[1.0], [2.0]])
        state = make_state(path2, rng, nu2=0.5, p=1)
        state.phi = np.array([0.1, -0.1])
        hyper = Hyperpriors(beta_mean=0.3, beta_var=2.0)
        mean, cov = beta_full_conditional(state, y, X, hyper)
        prec = float((X.T @ X)[0, 0]) / 0.5 + 1.0 / 2.0
        resid = y - state.phi
        rhs = float((X.T @ resid)[0]) / 0.5 + 0.3 / 2.0
        assert cov[0, 0] == pytest.approx(1.0 / prec, rel=1e-12)
        assert mean[0] == pytest.approx(rhs / prec, rel=1e-12)

    def test_huge_noise_returns_prior_mean(self, path2, rng):
        state = make_state(path2, rng, nu2=1e14)
        hyper = Hyperpriors(beta_mean=1.5, beta_var=1.0)
        mean, _ = beta_full_conditional(state, np.ones(2), np.ones((2, 1)), hyper)
        assert mean[0] == pytest.approx(1.5, abs=1e-6)

    def test_flat_prior_gives_least_squares(self, rng):
        g = grid_graph(2, 3)
        X = np.column_stack([np.ones(6), rng.standard_normal(6)])
        y = rng.standard_normal(6)
        state = make_state(g, rng, nu2=1.0, p=2)
        state.phi = np.zeros(6)
        hyper = Hyperpriors(beta_var=1e12)
        mean, _ = beta_full_conditional(state, y, X, hyper)
        ls, *_ = np.linalg.lstsq(X, y, rcond=None)
        assert np.allclose(mean, ls, atol=1e-6)

    def test_rank_deficiency_named(self, rng):
        X = np.column_stack([np.ones(5), np.ones(5)])
        with pytest.raises(ModelError, match="dup"):
            check_full_rank(X, ["Intercept", "dup"])


class TestPhiSweep:
    def test_isolated_node_prior_moments(self, rng):
        g = ArealGraph([0, 1], [(0, 1)])  # then use a graph with an island
        g = ArealGraph([0, 1, 2], [(0, 1)])
        tau2, rho = 0.3, 0.6
        state = make_state(g, rng, rho=rho, tau2=tau2, nu2=1e12)
        draws = np.empty(4000)
        for i in range(4000):
            state.phi = rng.standard_normal(3)
            phi, _ = phi_gibbs_sweep(state, np.zeros(3), np.zeros((3, 1)),
                                     g, rng, center=False)
            draws[i] = phi[2]  # the island
        assert draws.mean() == pytest.approx(0.0, abs=0.05)
        assert draws.var() == pytest.approx(tau2 / (1 - rho), rel=0.1)

    def test_rho_zero_prior_is_iid(self, rng, grid33):
        tau2 = 0.4
        state = make_state(grid33, rng, rho=0.0, tau2=tau2, nu2=1e12)
        draws = []
        for _ in range(2000):
            state.phi = rng.standard_normal(9)
            phi, _ = phi_gibbs_sweep(state, np.zeros(9), np.zeros((9, 1)),
                                     grid33, rng, center=False)
            draws.append(phi)
        draws = np.array(draws)
        assert np.allclose(draws.mean(axis=0), 0.0, atol=0.06)
        assert np.allclose(draws.var(axis=0), tau2, rtol=0.12)

    def test_centering_returns_shift(self, rng, grid33):
        state = make_state(grid33, rng)
        phi, shift = phi_gibbs_sweep(state, rng.standard_normal(9),
                                     np.ones((9, 1)), grid33, rng, center=True)
        assert abs(phi.sum()) < 1e-9
        assert shift != 0.0


class TestVarianceConditionals:
    def test_zero_residual_scales(self, path2, rng):
        state = make_state(path2, rng)
        state.beta = np.zeros(1)
        state.phi = np.zeros(2)
        y = np.zeros(2)
        X = np.zeros((2, 1))
        hyper = Hyperpriors()
        # nu2 ~ IG(1 + 1, 0.01): Monte Carlo mean vs analytic b/(a-1)
        draws = np.array([variance_full_conditionals(state, y, X, path2, rng,
                                                     hyper)[0]
                          for _ in range(20000)])
        assert draws.mean() == pytest.approx(0.01 / (2 - 1), rel=0.1)

    def test_phi_zero_tau2_prior(self, path2, rng):
        state = make_state(path2, rng)
        state.phi = np.zeros(2)
        hyper = Hyperpriors(a2=3.0, b2=2.0)
        # tau2 ~ IG(3 + 1, 2): mean 2/3, sd sqrt(b^2/((a-1)^2(a-2))) = 1/3...
        draws = np.array([variance_full_conditionals(
            state, np.zeros(2), np.zeros((2, 1)), path2, rng, hyper)[1]
            for _ in range(20000)])
        mean = 2.0 / 3.0
        se = math.sqrt(2.0 ** 2 / ((3.0 ** 2) * 2.0)) / math.sqrt(20000)
        assert abs(draws.mean() - mean) < 3 * se * 3  # generous MC slack


class TestRhoUpdate:
    def test_logdet_matches_dense(self, rng):
        for _ in range(10):
            g = random_connected_graph(int(rng.integers(2, 31)), rng)
            lam = laplacian_eigenvalues(g)
            rho = float(rng.uniform(0.05, 0.95))
            via_eigs = float(np.sum(np.log(rho * lam + 1.0 - rho)))
            sign, dense = np.linalg.slogdet(dense_leroux_precision(g, rho))
            assert sign > 0
            assert via_eigs == pytest.approx(dense, abs=1e-8)

    def test_identical_proposal_accepts(self):
        # acceptance log-ratio is exactly 0 when proposal == current
        lam = np.array([0.0, 2.0])
        for rho in (0.1, 0.5, 0.9):
            t = rho_log_target(rho, 0.2, 1.0, 2.0, lam)
            ratio = t - t + math.log(rho * (1 - rho)) - math.log(rho * (1 - rho))
            assert ratio == 0.0

    def test_out_of_range_target(self):
        lam = np.array([0.0, 2.0])
        assert rho_log_target(0.0, 0.2, 1.0, 2.0, lam) == -np.inf
        assert rho_log_target(1.0, 0.2, 1.0, 2.0, lam) == -np.inf

    def test_single_node_density_ks(self):
        # K = 1, phi = 0: target density prop to (1 - rho)^{1/2},
        # CDF F(r) = 1 - (1 - r)^{3/2}
        rng = np.random.default_rng(7)
        lam = np.array([0.0])
        rho = 0.5
        samples = []
        for i in range(60000):
            rho, _ = rho_metropolis_step(rho, 1.0, 0.0, 0.0, lam, 1.5, rng)
            if i % 25 == 0:
                samples.append(rho)
        stat = scipy.stats.kstest(samples,
                                  lambda r: 1.0 - (1.0 - np.asarray(r)) ** 1.5)
        assert stat.pvalue > 0.01

    def test_adapter_freezes_and_clips(self):
        adapter = StepAdapter(1.0, target=0.4, window=10)
        for _ in range(10):
            adapter.update(True)
        assert adapter.step == pytest.approx(math.exp(0.6))
        for _ in range(200):
            for _ in range(10):
                adapter.update(False)
        assert adapter.step >= 1e-3


class TestFitSpatial:
    def test_deterministic(self, rng):
        g = grid_graph(4, 4)
        scenario = SimScenario(graph=g, beta=np.array([1.0, 0.5]), nu2=0.1,
                               tau2=0.15, rho=0.6, seed=1)
        y, X, _ = generate_spatial_dataset(scenario)
        cfg = MCMCConfig(n_iterations=300, burn_in=100, thin=2, seed=9)
        f1 = fit_spatial(y, X, g, config=cfg)
        f2 = fit_spatial(y, X, g, config=cfg)
        assert np.array_equal(f1.beta, f2.beta)
        assert np.array_equal(f1.rho, f2.rho)
        assert np.array_equal(f1.loglik, f2.loglik)

    def test_retained_draw_count_and_shapes(self):
        g = grid_graph(3, 3)
        y, X, _ = generate_spatial_dataset(
            SimScenario(graph=g, beta=np.array([0.0]), nu2=0.2, tau2=0.1,
                        rho=0.4, seed=2))
        cfg = MCMCConfig(n_iterations=250, burn_in=50, thin=4, seed=0)
        fit = fit_spatial(y, X, g, config=cfg)
        assert fit.n_draws == cfg.n_retained == 50
        assert fit.phi.shape == (50, 9)
        assert fit.loglik.shape == (50, 9)
        assert 0.0 <= fit.rho_acceptance <= 1.0

    def test_loglik_rows_match_deviance(self):
        g = grid_graph(3, 3)
        y, X, _ = generate_spatial_dataset(
            SimScenario(graph=g, beta=np.array([1.0]), nu2=0.2, tau2=0.1,
                        rho=0.4, seed=3))
        fit = fit_spatial(y, X, g,
                          config=MCMCConfig(n_iterations=200, burn_in=50,
                                            thin=2, seed=0))
        assert np.allclose(fit.deviances(), -2.0 * fit.loglik.sum(axis=1),
                           atol=1e-10)

    def test_near_noiseless_residuals(self):
        # noiseless generation; the noise variance is held near zero through
        # a sharp prior (otherwise the nu2/tau2 split is weakly identified
        # and the posterior keeps a small but nonzero noise floor)
        g = grid_graph(7, 11)
        y, X, _ = generate_spatial_dataset(
            SimScenario(graph=g, beta=np.array([2.0, 1.0]), nu2=1e-8,
                        tau2=0.15, rho=0.6, seed=4))
        hyper = Hyperpriors(a1=1e6, b1=(1e6 + 1) * 1e-8)
        fit = fit_spatial(y, X, g, hyper,
                          MCMCConfig(n_iterations=2000, burn_in=500,
                                     thin=3, seed=0))
        _, resid = fitted_and_residuals(fit, y, X)
        assert np.max(np.abs(resid)) < 0.01
        assert abs(resid.mean()) < 0.01

    def test_dimension_mismatch(self, grid33):
        with pytest.raises(ModelError, match="mismatch"):
            fit_spatial(np.zeros(5), np.ones((5, 1)), grid33)

    def test_config_validation(self):
        with pytest.raises(ModelError):
            MCMCConfig(n_iterations=10, burn_in=10)
        with pytest.raises(ModelError):
            MCMCConfig(thin=0)
        with pytest.raises(ModelError):
            Hyperpriors(a1=0.0)

    def test_phi_centered_in_draws(self):
        g = grid_graph(3, 3)
        y, X, _ = generate_spatial_dataset(
            SimScenario(graph=g, beta=np.array([1.0]), nu2=0.1, tau2=0.2,
                        rho=0.5, seed=5))
        fit = fit_spatial(y, X, g,
                          config=MCMCConfig(n_iterations=200, burn_in=100,
                                            thin=1, seed=0))
        assert np.max(np.abs(fit.phi.sum(axis=1))) < 1e-9
