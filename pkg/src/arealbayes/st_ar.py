"""Gibbs/Metropolis sampler for the spatio-temporal AR(2) regression model.

K x T Gaussian panel y_kt ~ N(x_kt' B + psi_kt, nu2) with a single set of
spatio-temporally autocorrelated random effects psi.  The psi process is a
second-order autoregression with Leroux-CAR innovations:

    psi_1 ~ N(0, tau2 Q(rho_s)^-1)
    psi_2 | psi_1 ~ N(rho_1t psi_1, tau2 Q(rho_s)^-1)
    psi_t | ... ~ N(rho_1t psi_{t-1} + rho_2t psi_{t-2}, tau2 Q(rho_s)^-1)

with (rho_1t, rho_2t) given a flat prior on the AR(2) stationarity
triangle.  psi_t slices are updated by block Gibbs via Cholesky of the
conditional precision (a scalar multiple of Q plus a diagonal); at most
three distinct scalar multiples occur per iteration, so their factors are
shared across slices.  With T = 1 the sampler degenerates to the spatial
model and reuses its single-site sweep, so draws match fit_spatial exactly
under a shared seed.
"""
from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np
import scipy.linalg

from .car_spatial import (
    DivergenceError,
    Hyperpriors,
    MCMCConfig,
    ModelError,
    StepAdapter,
    check_full_rank,
    draw_inv_gamma,
    draw_mvn,
    edge_arrays,
    fit_spatial,
    leroux_precision,
    rho_metropolis_step,
)
from .graph import ArealGraph, laplacian_eigenvalues

# Above this many bytes the pointwise log-likelihood matrix is written to a
# disk-backed memmap in fixed-size blocks instead of held in memory.
LOGLIK_MEMORY_LIMIT = 128 * 1024 * 1024


def in_stationarity_triangle(rho_1t: float, rho_2t: float) -> bool:
    return abs(rho_2t) < 1.0 and rho_2t + rho_1t < 1.0 and rho_2t - rho_1t < 1.0


def ar2_innovations(psi: np.ndarray, rho_1t: float, rho_2t: float) -> np.ndarray:
    """(K, T) innovation fields of the AR(2) recursion (identity for t < 3)."""
    e = psi.copy()
    if psi.shape[1] >= 2:
        e[:, 1:] -= rho_1t * psi[:, :-1]
    if psi.shape[1] >= 3:
        e[:, 2:] -= rho_2t * psi[:, :-2]
    return e


def st_effect_logdensity(psi, rho_s: float, rho_1t: float, rho_2t: float,
                         tau2: float, graph: ArealGraph,
                         eigenvalues=None) -> float:
    """Exact joint log-density of the psi process (constants included).

    Uses the eigenvalue log-determinant of Q(rho_s) and the edge
    decomposition of the innovation quadratic forms.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[0] != graph.n_units:
        raise ModelError(f"psi must be (K, T) with K={graph.n_units}, got {psi.shape}")
    if not (0.0 <= rho_s < 1.0):
        raise ModelError(f"rho_s must be in [0, 1), got {rho_s}")
    if not in_stationarity_triangle(rho_1t, rho_2t):
        raise ModelError(
            f"(rho_1t, rho_2t) = ({rho_1t}, {rho_2t}) outside the AR(2) "
            "stationarity triangle")
    if tau2 <= 0:
        raise ModelError("tau2 must be positive")
    K, T = psi.shape
    if eigenvalues is None:
        eigenvalues = laplacian_eigenvalues(graph)
    e = ar2_innovations(psi, rho_1t, rho_2t)
    ei, ej = edge_arrays(graph)
    diff = e[ei, :] - e[ej, :]
    quad = rho_s * float(np.sum(diff * diff)) + (1.0 - rho_s) * float(np.sum(e * e))
    logdet = float(np.sum(np.log(rho_s * eigenvalues + 1.0 - rho_s)))
    return (-0.5 * K * T * math.log(2.0 * math.pi)
            - 0.5 * K * T * math.log(tau2)
            + 0.5 * T * logdet
            - quad / (2.0 * tau2))


class STState:
    """Current sampler state for the spatio-temporal model."""

    def __init__(self, B, psi, nu2, tau2, rho_s, rho_1t, rho_2t):
        self.B = np.asarray(B, dtype=float)
        self.psi = np.asarray(psi, dtype=float)
        self.nu2 = float(nu2)
        self.tau2 = float(tau2)
        self.rho_s = float(rho_s)
        self.rho_1t = float(rho_1t)
        self.rho_2t = float(rho_2t)
        if not in_stationarity_triangle(self.rho_1t, self.rho_2t):
            raise ModelError("(rho_1t, rho_2t) outside the stationarity triangle")


def _ar2_band(t: int, T: int, rho_1t: float, rho_2t: float):
    """Diagonal weight c_t and the cross weights of slice t in the joint
    precision (A'A) x Q / tau2, as {offset: weight} over existing slices."""
    c = 1.0
    if t + 1 <= T - 1:
        c += rho_1t ** 2
    if t + 2 <= T - 1:
        c += rho_2t ** 2
    cross = {}
    if t + 1 <= T - 1:
        w = -rho_1t + (rho_1t * rho_2t if t + 2 <= T - 1 else 0.0)
        cross[1] = w
    if t - 1 >= 0:
        w = -rho_1t + (rho_1t * rho_2t if t + 1 <= T - 1 else 0.0)
        cross[-1] = w
    if t + 2 <= T - 1:
        cross[2] = -rho_2t
    if t - 2 >= 0:
        cross[-2] = -rho_2t
    return c, cross


def psi_conditional_moments(t: int, state: STState, y, X, graph: ArealGraph,
                            include_likelihood: bool = True):
    """Gaussian full-conditional (mean, precision) of slice psi_t (0-based)."""
    K, T = state.psi.shape
    if not (0 <= t < T):
        raise ModelError(f"slice index {t} out of range for T={T}")
    Q = leroux_precision(graph, state.rho_s).toarray()
    c, cross = _ar2_band(t, T, state.rho_1t, state.rho_2t)
    prec = (c / state.tau2) * Q
    b = np.zeros(K)
    for offset, w in cross.items():
        b -= w * state.psi[:, t + offset]
    h = Q @ b / state.tau2
    if include_likelihood:
        prec = prec + np.eye(K) / state.nu2
        resid = np.asarray(y)[:, t] - np.asarray(X)[:, t, :] @ state.B
        h = h + resid / state.nu2
    mean = np.linalg.solve(prec, h)
    return mean, prec


def psi_block_update(t: int, state: STState, y, X, graph: ArealGraph,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw slice psi_t from its Gaussian full conditional."""
    mean, prec = psi_conditional_moments(t, state, y, X, graph)
    L = np.linalg.cholesky(prec)
    z = rng.standard_normal(mean.shape[0])
    return mean + scipy.linalg.solve_triangular(L, z, lower=True, trans="T")


def _triangle_uniform(rng: np.random.Generator):
    while True:
        r1 = rng.uniform(-2.0, 2.0)
        r2 = rng.uniform(-1.0, 1.0)
        if in_stationarity_triangle(r1, r2):
            return r1, r2


def temporal_rho_update(state: STState, graph: ArealGraph,
                        rng: np.random.Generator, max_tries: int = 500):
    """Draw (rho_1t, rho_2t) from their joint conditional.

    Given psi and Q(rho_s) the innovations define a conjugate 2-coefficient
    Gaussian regression with known precision; draws outside the
    stationarity triangle are rejected (flat prior on the triangle).  A
    degenerate conditional (psi ~ 0) falls back to a uniform draw over the
    triangle.
    """
    K, T = state.psi.shape
    if T < 3:
        raise ModelError(f"temporal coefficients are not identifiable with T={T} < 3")
    Q = leroux_precision(graph, state.rho_s).toarray()
    psi = state.psi
    Qpsi = Q @ psi

    def ip(a, b):
        return float(psi[:, a] @ Qpsi[:, b])

    lam11 = ip(0, 0) + sum(ip(t - 1, t - 1) for t in range(2, T))
    lam12 = sum(ip(t - 1, t - 2) for t in range(2, T))
    lam22 = sum(ip(t - 2, t - 2) for t in range(2, T))
    r1 = ip(0, 1) + sum(ip(t - 1, t) for t in range(2, T))
    r2 = sum(ip(t - 2, t) for t in range(2, T))
    lam = np.array([[lam11, lam12], [lam12, lam22]]) / state.tau2
    rhs = np.array([r1, r2]) / state.tau2

    if np.max(np.abs(lam)) < 1e-12:
        return _triangle_uniform(rng)

    ridge = 1e-10 * max(1.0, lam[0, 0] + lam[1, 1])
    for _ in range(10):
        try:
            cov = np.linalg.inv(lam + ridge * np.eye(2))
            cov = (cov + cov.T) / 2.0
            np.linalg.cholesky(cov)
            break
        except np.linalg.LinAlgError:
            ridge *= 100.0
    mean = cov @ rhs
    for _ in range(max_tries):
        draw = draw_mvn(rng, mean, cov)
        if in_stationarity_triangle(float(draw[0]), float(draw[1])):
            return float(draw[0]), float(draw[1])
    return state.rho_1t, state.rho_2t  # keep current if the triangle mass is tiny


class STFit:
    """Retained posterior draws from fit_st.

    psi is economized to its running posterior mean; the pointwise
    log-likelihood matrix (draws x K*T cells) lives in memory for small
    problems and in a disk-backed memmap otherwise.
    """

    def __init__(self, B, nu2, tau2, rho_s, rho_1t, rho_2t, psi_mean,
                 fitted_mean, loglik, deviance, rho_acceptance,
                 beta_names=None, loglik_path=None):
        self.B = np.asarray(B)
        self.nu2 = np.asarray(nu2)
        self.tau2 = np.asarray(tau2)
        self.rho_s = np.asarray(rho_s)
        self.rho_1t = np.asarray(rho_1t)
        self.rho_2t = np.asarray(rho_2t)
        self.psi_mean = np.asarray(psi_mean)
        self.fitted_mean = np.asarray(fitted_mean)
        self.loglik = loglik
        self.deviance = np.asarray(deviance)
        self.rho_acceptance = float(rho_acceptance)
        self.beta_names = list(beta_names) if beta_names else \
            [f"beta{j}" for j in range(self.B.shape[1])]
        self.loglik_path = loglik_path

    @property
    def n_draws(self) -> int:
        return self.B.shape[0]

    def parameter_draws(self) -> dict:
        out = {name: self.B[:, j] for j, name in enumerate(self.beta_names)}
        out["tau2"] = self.tau2
        out["nu2"] = self.nu2
        out["rho_s"] = self.rho_s
        out["rho_1t"] = self.rho_1t
        out["rho_2t"] = self.rho_2t
        return out

    def deviances(self) -> np.ndarray:
        return self.deviance


def _init_st_state(y, X):
    K, T, p = X.shape
    flatX = X.reshape(K * T, p)
    flaty = y.reshape(K * T)
    B0, *_ = np.linalg.lstsq(flatX, flaty, rcond=None)
    resid = flaty - flatX @ B0
    var0 = max(float(resid.var()), 1e-6)
    return STState(B=B0, psi=np.zeros((K, T)), nu2=var0, tau2=var0,
                   rho_s=0.5, rho_1t=0.0, rho_2t=0.0)


def fit_st(y, X, graph: ArealGraph, hyper: Hyperpriors = Hyperpriors(),
           config: MCMCConfig = MCMCConfig(n_iterations=11000, burn_in=1000,
                                           thin=10),
           beta_names=None, freeze_temporal: bool = False,
           loglik_path=None) -> STFit:
    """Run the full spatio-temporal Gibbs/Metropolis cycle.

    Update order per iteration: B, psi_t for t = 1..T (sequential; the
    spatial single-site sweep when T = 1), centering with the grand mean
    folded into the intercept, nu2, tau2, rho_s, (rho_1t, rho_2t) when
    T >= 3 and not frozen.  Deterministic given config.seed.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if X.ndim == 2:
        X = X[:, None, :]
    K, T = y.shape
    if X.shape[:2] != (K, T) or K != graph.n_units:
        raise ModelError(
            f"dimension mismatch: y {y.shape}, X {X.shape}, K={graph.n_units}")
    p = X.shape[2]
    check_full_rank(X.reshape(K * T, p), beta_names)
    if T == 1:
        # Single-slice collapse: the model is exactly the spatial Leroux
        # regression, so delegate and wrap (draws match fit_spatial
        # bit-for-bit under a shared seed).
        sp = fit_spatial(y[:, 0], X[:, 0, :], graph, hyper, config, beta_names)
        psi_mean = sp.phi.mean(axis=0)[:, None]
        fitted_mean = (X[:, 0, :] @ sp.beta.mean(axis=0))[:, None] + psi_mean
        zeros = np.zeros(sp.n_draws)
        return STFit(sp.beta, sp.nu2, sp.tau2, sp.rho, zeros, zeros,
                     psi_mean, fitted_mean, sp.loglik, sp.deviances(),
                     rho_acceptance=sp.rho_acceptance, beta_names=beta_names)
    eigenvalues = laplacian_eigenvalues(graph)
    has_intercept = bool(np.all(X[:, :, 0] == 1.0))
    rng = np.random.default_rng(config.seed)
    ei, ej = edge_arrays(graph)

    state = _init_st_state(y, X)
    adapter = StepAdapter(config.rho_step)
    accepts = 0

    flatX = X.reshape(K * T, p)
    XtX = flatX.T @ flatX
    prior_prec = 1.0 / hyper.beta_var_vec(p)
    prior_mean = hyper.beta_mean_vec(p)

    S = config.n_retained
    n_cells = K * T
    B_d = np.empty((S, p))
    nu2_d = np.empty(S)
    tau2_d = np.empty(S)
    rho_s_d = np.empty(S)
    rho_1t_d = np.empty(S)
    rho_2t_d = np.empty(S)
    dev_d = np.empty(S)
    psi_sum = np.zeros((K, T))

    nbytes = S * n_cells * 8
    memmap_path = None
    if loglik_path is not None:
        memmap_path = Path(loglik_path)
        loglik_d = np.lib.format.open_memmap(
            memmap_path, mode="w+", dtype=np.float64, shape=(S, n_cells))
    elif nbytes > LOGLIK_MEMORY_LIMIT:
        tmp = tempfile.NamedTemporaryFile(prefix="arealbayes_loglik_",
                                          suffix=".npy", delete=False)
        tmp.close()
        memmap_path = Path(tmp.name)
        loglik_d = np.lib.format.open_memmap(
            memmap_path, mode="w+", dtype=np.float64, shape=(S, n_cells))
    else:
        loglik_d = np.empty((S, n_cells))

    s = 0
    for it in range(1, config.n_iterations + 1):
        # B: global conjugate Gaussian
        prec = XtX / state.nu2 + np.diag(prior_prec)
        cov = np.linalg.inv(prec)
        cov = (cov + cov.T) / 2.0
        rhs = flatX.T @ (y - state.psi).ravel() / state.nu2 + prior_prec * prior_mean
        state.B = draw_mvn(rng, cov @ rhs, cov)

        # psi slices (block Gibbs, shared Cholesky factors per diagonal weight)
        Q = leroux_precision(graph, state.rho_s).toarray()
        factors = {}
        mu_x = (flatX @ state.B).reshape(K, T)
        resid_all = y - mu_x
        for t in range(T):
            c, cross = _ar2_band(t, T, state.rho_1t, state.rho_2t)
            if c not in factors:
                P = (c / state.tau2) * Q + np.eye(K) / state.nu2
                factors[c] = np.linalg.cholesky(P)
            L = factors[c]
            b = np.zeros(K)
            for offset, w in cross.items():
                b -= w * state.psi[:, t + offset]
            h = Q @ b / state.tau2 + resid_all[:, t] / state.nu2
            half = scipy.linalg.solve_triangular(L, h, lower=True)
            mean = scipy.linalg.solve_triangular(L, half, lower=True, trans="T")
            z = rng.standard_normal(K)
            state.psi[:, t] = mean + scipy.linalg.solve_triangular(
                L, z, lower=True, trans="T")
        # Centering only applies when an intercept can absorb the shift.
        if has_intercept:
            shift = float(state.psi.mean())
            state.psi -= shift
            state.B[0] += shift
            mu_x = mu_x + shift

        # variances
        resid = y - mu_x - state.psi
        state.nu2 = draw_inv_gamma(
            rng, hyper.a1 + K * T / 2.0, hyper.b1 + 0.5 * float(np.sum(resid * resid)))
        e = ar2_innovations(state.psi, state.rho_1t, state.rho_2t)
        diff = e[ei, :] - e[ej, :]
        edge_ss = float(np.sum(diff * diff))
        sq_ss = float(np.sum(e * e))
        quad = state.rho_s * edge_ss + (1.0 - state.rho_s) * sq_ss
        state.tau2 = draw_inv_gamma(
            rng, hyper.a2 + K * T / 2.0, hyper.b2 + 0.5 * quad)

        # rho_s Metropolis (shared machinery; T innovation fields)
        state.rho_s, accepted = rho_metropolis_step(
            state.rho_s, state.tau2, edge_ss, sq_ss, eigenvalues,
            adapter.step, rng, n_fields=T)
        accepts += accepted
        if config.adapt and it <= config.burn_in:
            adapter.update(accepted)

        # temporal coefficients
        if T >= 3 and not freeze_temporal:
            state.rho_1t, state.rho_2t = temporal_rho_update(state, graph, rng)

        for name, value in (("nu2", state.nu2), ("tau2", state.tau2),
                            ("rho_s", state.rho_s), ("rho_1t", state.rho_1t),
                            ("rho_2t", state.rho_2t)):
            if not math.isfinite(value):
                raise DivergenceError(it, name)

        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            if not np.all(np.isfinite(state.B)):
                raise DivergenceError(it, "B")
            if not np.all(np.isfinite(state.psi)):
                raise DivergenceError(it, "psi")
            B_d[s] = state.B
            nu2_d[s] = state.nu2
            tau2_d[s] = state.tau2
            rho_s_d[s] = state.rho_s
            rho_1t_d[s] = state.rho_1t
            rho_2t_d[s] = state.rho_2t
            psi_sum += state.psi
            mu = (flatX @ state.B).reshape(K, T) + state.psi
            cell_resid = (y - mu).ravel()
            ll = -0.5 * (math.log(2.0 * math.pi * state.nu2)
                         + cell_resid ** 2 / state.nu2)
            loglik_d[s] = ll
            dev_d[s] = -2.0 * float(ll.sum())
            s += 1

    psi_mean = psi_sum / max(S, 1)
    fitted_mean = (flatX @ B_d.mean(axis=0)).reshape(K, T) + psi_mean
    if isinstance(loglik_d, np.memmap):
        loglik_d.flush()
    return STFit(B_d, nu2_d, tau2_d, rho_s_d, rho_1t_d, rho_2t_d,
                 psi_mean, fitted_mean, loglik_d, dev_d,
                 rho_acceptance=accepts / config.n_iterations,
                 beta_names=beta_names, loglik_path=memmap_path)


def fit_quality(fit: STFit, y):
    """(Pearson r, slope of actual-on-fitted regression) over all cells."""
    if fit.n_draws == 0:
        raise ModelError("fit has no retained draws")
    actual = np.asarray(y, dtype=float).ravel()
    fitted = fit.fitted_mean.ravel()
    if actual.shape != fitted.shape:
        raise ModelError(f"y shape {actual.shape} does not match fit {fitted.shape}")
    r = float(np.corrcoef(actual, fitted)[0, 1])
    fc = fitted - fitted.mean()
    slope = float(fc @ (actual - actual.mean()) / (fc @ fc))
    return r, slope
