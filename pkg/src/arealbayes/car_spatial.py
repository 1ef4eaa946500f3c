"""Gibbs/Metropolis sampler for the spatial Leroux regression model.

Gaussian likelihood y_k ~ N(x_k' beta + phi_k, nu2), Gaussian prior on
beta, inverse-gamma priors on nu2 and tau2, Leroux CAR prior on the
spatial effects phi with precision tau2^-1 * Q(rho),
Q(rho) = rho (D - W) + (1 - rho) I, and a uniform prior on rho in (0, 1).

rho is updated by a random-walk Metropolis step on the logit scale using
the Laplacian eigenvalues for the log-determinant; everything else is
conjugate.  phi is mean-centered after every sweep with the removed mean
folded into the intercept.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .graph import ArealGraph, laplacian_eigenvalues


class ModelError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """A sampler state went non-finite; carries the iteration and parameter."""

    def __init__(self, iteration: int, parameter: str):
        super().__init__(f"non-finite {parameter} at iteration {iteration}")
        self.iteration = iteration
        self.parameter = parameter


@dataclass(frozen=True)
class Hyperpriors:
    """Prior settings for both models.

    a1, b1 (a2, b2): shape/scale of the inverse-gamma prior on the noise
    (spatial) variance.  beta_mean / beta_var give the Gaussian coefficient
    prior; beta_var is the diagonal of its covariance (scalar broadcasts).
    Defaults are the conventional diffuse settings for this model family.
    """

    a1: float = 1.0
    b1: float = 0.01
    a2: float = 1.0
    b2: float = 0.01
    beta_mean: object = 0.0
    beta_var: object = 1e5

    def __post_init__(self):
        for name in ("a1", "b1", "a2", "b2"):
            if getattr(self, name) <= 0:
                raise ModelError(f"hyperprior {name} must be positive")
        if np.any(np.asarray(self.beta_var, dtype=float) <= 0):
            raise ModelError("all beta prior variances must be positive")

    def beta_mean_vec(self, p: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.beta_mean, dtype=float), (p,)).copy()

    def beta_var_vec(self, p: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.beta_var, dtype=float), (p,)).copy()


@dataclass(frozen=True)
class MCMCConfig:
    n_iterations: int = 22000
    burn_in: int = 2000
    thin: int = 10
    seed: int = 0
    rho_step: float = 1.0
    adapt: bool = True

    def __post_init__(self):
        if not (0 <= self.burn_in < self.n_iterations):
            raise ModelError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise ModelError("thin must be >= 1")
        if self.rho_step <= 0:
            raise ModelError("rho_step must be positive")

    @property
    def n_retained(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin


@dataclass
class LerouxState:
    beta: np.ndarray
    phi: np.ndarray
    nu2: float
    tau2: float
    rho: float


# ---------------------------------------------------------------------------
# Shared numerics (also used by the spatio-temporal sampler)


def draw_mvn(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    return mean + L @ rng.standard_normal(mean.shape[0])


def draw_inv_gamma(rng: np.random.Generator, shape: float, scale: float) -> float:
    return scale / rng.gamma(shape)


def check_full_rank(X: np.ndarray, names=None):
    """Raise ModelError naming near-dependent columns if X is rank deficient."""
    p = X.shape[1]
    _, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag.max() if diag.size else 1.0)
    bad = np.flatnonzero(diag <= tol)
    if bad.size:
        labels = [names[j] if names else f"column {j}" for j in bad]
        raise ModelError(f"design matrix is rank deficient; offending columns: {labels}")


def edge_arrays(graph: ArealGraph):
    if graph.n_edges == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    e = np.asarray(graph.edges, dtype=np.intp)
    return e[:, 0], e[:, 1]


def leroux_quadform(phi: np.ndarray, rho: float, ei: np.ndarray, ej: np.ndarray) -> float:
    """phi' Q(rho) phi via the edge decomposition
    rho * sum_edges (phi_k - phi_i)^2 + (1 - rho) * ||phi||^2."""
    diff = phi[ei] - phi[ej]
    return rho * float(diff @ diff) + (1.0 - rho) * float(phi @ phi)


def rho_log_target(rho: float, tau2: float, edge_ss: float, sq_ss: float,
                   eigenvalues: np.ndarray, n_fields: int = 1) -> float:
    """Log density of rho given the field(s), up to a constant.

    edge_ss / sq_ss are the edge-difference and squared-norm sums over all
    n_fields innovation fields; the log-determinant term enters once per
    field via the Laplacian eigenvalues.
    """
    if not (0.0 < rho < 1.0):
        return -np.inf
    logdet = float(np.sum(np.log(rho * eigenvalues + 1.0 - rho)))
    quad = rho * edge_ss + (1.0 - rho) * sq_ss
    return 0.5 * n_fields * logdet - quad / (2.0 * tau2)


def rho_metropolis_step(rho: float, tau2: float, edge_ss: float, sq_ss: float,
                        eigenvalues: np.ndarray, step: float,
                        rng: np.random.Generator, n_fields: int = 1):
    """One logit-scale random-walk Metropolis update; returns (rho, accepted).

    The proposal is symmetric in logit(rho); the Jacobian log(rho (1-rho))
    appears in the acceptance ratio so detailed balance holds for the
    uniform-prior target on (0, 1).
    """
    z = math.log(rho / (1.0 - rho)) + step * rng.standard_normal()
    proposal = 1.0 / (1.0 + math.exp(-z))
    log_ratio = (
        rho_log_target(proposal, tau2, edge_ss, sq_ss, eigenvalues, n_fields)
        - rho_log_target(rho, tau2, edge_ss, sq_ss, eigenvalues, n_fields)
        + math.log(proposal * (1.0 - proposal))
        - math.log(rho * (1.0 - rho))
    )
    if math.log(rng.uniform()) < log_ratio:
        return proposal, True
    return rho, False


class StepAdapter:
    """Robbins-Monro style scale adaptation toward a target acceptance rate.

    Active only during burn-in; the scale is frozen afterwards so detailed
    balance holds over the retained draws.
    """

    def __init__(self, step: float, target: float = 0.4, window: int = 50):
        self.step = step
        self.target = target
        self.window = window
        self._accepts = 0
        self._count = 0

    def update(self, accepted: bool):
        self._accepts += bool(accepted)
        self._count += 1
        if self._count >= self.window:
            rate = self._accepts / self._count
            self.step = float(np.clip(self.step * math.exp(rate - self.target), 1e-3, 10.0))
            self._accepts = 0
            self._count = 0


# ---------------------------------------------------------------------------
# Full conditionals


def leroux_precision(graph: ArealGraph, rho: float) -> scipy.sparse.csr_matrix:
    """Sparse K x K precision Q(rho) = rho (D - W) + (1 - rho) I."""
    if not (0.0 <= rho <= 1.0):
        raise ModelError(f"rho must be in [0, 1], got {rho}")
    K = graph.n_units
    ei, ej = edge_arrays(graph)
    rows = np.concatenate([np.arange(K), ei, ej])
    cols = np.concatenate([np.arange(K), ej, ei])
    vals = np.concatenate([
        rho * graph.degrees + (1.0 - rho),
        np.full(ei.size, -rho),
        np.full(ei.size, -rho),
    ])
    return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(K, K))


def beta_full_conditional(state: LerouxState, y: np.ndarray, X: np.ndarray,
                          hyper: Hyperpriors):
    """Gaussian full conditional of beta: returns (mean, covariance)."""
    p = X.shape[1]
    check_full_rank(X)
    prior_prec = 1.0 / hyper.beta_var_vec(p)
    prec = X.T @ X / state.nu2 + np.diag(prior_prec)
    cov = np.linalg.inv(prec)
    cov = (cov + cov.T) / 2.0
    rhs = X.T @ (y - state.phi) / state.nu2 + prior_prec * hyper.beta_mean_vec(p)
    return cov @ rhs, cov


def phi_gibbs_sweep(state: LerouxState, y: np.ndarray, X: np.ndarray,
                    graph: ArealGraph, rng: np.random.Generator,
                    center: bool = True):
    """One sequential single-site Gibbs sweep over phi.

    Each phi_k is drawn from the Gaussian full conditional with precision
    (rho sum_i w_ki + 1 - rho)/tau2 + 1/nu2 and mean
    precision^-1 (rho sum_i w_ki phi_i / tau2 + (y_k - x_k'beta)/nu2).
    Returns (phi, shift) where shift is the mean removed by centering
    (0.0 when center is false); the caller folds it into the intercept.
    """
    resid = (y - X @ state.beta).tolist()
    phi = state.phi.tolist()
    nbrs = [nb.tolist() for nb in graph.neighbors]
    rho, tau2, nu2 = state.rho, state.tau2, state.nu2
    inv_nu2 = 1.0 / nu2
    inv_tau2 = 1.0 / tau2
    z = rng.standard_normal(len(phi)).tolist()
    for k in range(len(phi)):
        s = 0.0
        for i in nbrs[k]:
            s += phi[i]
        prec = (rho * len(nbrs[k]) + 1.0 - rho) * inv_tau2 + inv_nu2
        mean = (rho * s * inv_tau2 + resid[k] * inv_nu2) / prec
        phi[k] = mean + z[k] / math.sqrt(prec)
    out = np.array(phi)
    shift = 0.0
    if center:
        shift = float(out.mean())
        out -= shift
    return out, shift


def variance_full_conditionals(state: LerouxState, y: np.ndarray, X: np.ndarray,
                               graph: ArealGraph, rng: np.random.Generator,
                               hyper: Hyperpriors):
    """Conjugate inverse-gamma draws of (nu2, tau2) given everything else."""
    K = graph.n_units
    resid = y - X @ state.beta - state.phi
    nu2 = draw_inv_gamma(rng, hyper.a1 + K / 2.0, hyper.b1 + 0.5 * float(resid @ resid))
    ei, ej = edge_arrays(graph)
    quad = leroux_quadform(state.phi, state.rho, ei, ej)
    tau2 = draw_inv_gamma(rng, hyper.a2 + K / 2.0, hyper.b2 + 0.5 * quad)
    return nu2, tau2


def rho_metropolis(state: LerouxState, graph: ArealGraph, eigenvalues: np.ndarray,
                   step: float, rng: np.random.Generator):
    """Metropolis update of rho given phi and tau2; returns (rho, accepted)."""
    ei, ej = edge_arrays(graph)
    diff = state.phi[ei] - state.phi[ej]
    edge_ss = float(diff @ diff)
    sq_ss = float(state.phi @ state.phi)
    return rho_metropolis_step(state.rho, state.tau2, edge_ss, sq_ss,
                               eigenvalues, step, rng)


# ---------------------------------------------------------------------------
# Fit driver


class LerouxFit:
    """Retained posterior draws from fit_spatial."""

    def __init__(self, beta, phi, nu2, tau2, rho, loglik, rho_acceptance,
                 beta_names=None):
        self.beta = np.asarray(beta)
        self.phi = np.asarray(phi)
        self.nu2 = np.asarray(nu2)
        self.tau2 = np.asarray(tau2)
        self.rho = np.asarray(rho)
        self.loglik = np.asarray(loglik)
        self.rho_acceptance = float(rho_acceptance)
        self.beta_names = list(beta_names) if beta_names else \
            [f"beta{j}" for j in range(self.beta.shape[1])]
        if self.loglik.shape != (self.beta.shape[0], self.phi.shape[1]):
            raise ModelError("pointwise log-likelihood dimensions do not match draws")

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def parameter_draws(self) -> dict:
        """Scalar chains keyed by parameter name (for summaries/diagnostics)."""
        out = {name: self.beta[:, j] for j, name in enumerate(self.beta_names)}
        out["tau2"] = self.tau2
        out["nu2"] = self.nu2
        out["rho"] = self.rho
        return out

    def deviances(self) -> np.ndarray:
        return -2.0 * self.loglik.sum(axis=1)


def _initial_state(y, X, graph):
    beta0, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta0
    var0 = max(float(resid.var()), 1e-6)
    return LerouxState(beta=beta0, phi=np.zeros(graph.n_units),
                       nu2=var0, tau2=var0, rho=0.5)


def _gaussian_loglik(y, mean, nu2):
    resid = y - mean
    return -0.5 * (math.log(2.0 * math.pi * nu2) + resid ** 2 / nu2)


def fit_spatial(y, X, graph: ArealGraph, hyper: Hyperpriors = Hyperpriors(),
                config: MCMCConfig = MCMCConfig(), beta_names=None) -> LerouxFit:
    """Run the full Gibbs/Metropolis cycle and return retained draws.

    Update order per iteration: beta, phi sweep (centered, mean folded into
    the intercept when column 0 is constant ones), nu2, tau2, rho.
    Deterministic given config.seed.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.size or y.size != graph.n_units:
        raise ModelError(
            f"dimension mismatch: y {y.shape}, X {X.shape}, K={graph.n_units}")
    check_full_rank(X, beta_names)
    K, p = X.shape
    eigenvalues = laplacian_eigenvalues(graph)
    has_intercept = bool(np.all(X[:, 0] == 1.0))
    rng = np.random.default_rng(config.seed)

    state = _initial_state(y, X, graph)
    adapter = StepAdapter(config.rho_step)
    accepts = 0

    S = config.n_retained
    beta_d = np.empty((S, p))
    phi_d = np.empty((S, K))
    nu2_d = np.empty(S)
    tau2_d = np.empty(S)
    rho_d = np.empty(S)
    loglik_d = np.empty((S, K))

    s = 0
    for it in range(1, config.n_iterations + 1):
        mean, cov = beta_full_conditional(state, y, X, hyper)
        state.beta = draw_mvn(rng, mean, cov)
        # Centering only applies when an intercept can absorb the shift.
        state.phi, shift = phi_gibbs_sweep(state, y, X, graph, rng,
                                           center=has_intercept)
        if has_intercept:
            state.beta[0] += shift
        state.nu2, state.tau2 = variance_full_conditionals(
            state, y, X, graph, rng, hyper)
        state.rho, accepted = rho_metropolis(
            state, graph, eigenvalues, adapter.step, rng)
        accepts += accepted
        if config.adapt and it <= config.burn_in:
            adapter.update(accepted)

        for name, value in (("nu2", state.nu2), ("tau2", state.tau2),
                            ("rho", state.rho)):
            if not math.isfinite(value):
                raise DivergenceError(it, name)

        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            if not np.all(np.isfinite(state.beta)):
                raise DivergenceError(it, "beta")
            if not np.all(np.isfinite(state.phi)):
                raise DivergenceError(it, "phi")
            beta_d[s] = state.beta
            phi_d[s] = state.phi
            nu2_d[s] = state.nu2
            tau2_d[s] = state.tau2
            rho_d[s] = state.rho
            loglik_d[s] = _gaussian_loglik(y, X @ state.beta + state.phi, state.nu2)
            s += 1

    return LerouxFit(beta_d, phi_d, nu2_d, tau2_d, rho_d, loglik_d,
                     rho_acceptance=accepts / config.n_iterations,
                     beta_names=beta_names)


def fitted_and_residuals(fit: LerouxFit, y, X):
    """Posterior-mean fitted values x_k' E[beta] + E[phi_k] and residuals."""
    if fit.n_draws == 0:
        raise ModelError("fit has no retained draws")
    y = np.asarray(y, dtype=float).ravel()
    fitted = np.asarray(X, dtype=float) @ fit.beta.mean(axis=0) + fit.phi.mean(axis=0)
    return fitted, y - fitted
