"""Generative oracle: simulate CAR fields and full synthetic datasets.

Forward-simulates the spatial model (CAR field plus Gaussian noise) and
the spatio-temporal AR(2) process for recovery, calibration, and property
tests.  All draws come from numpy's PCG64 generator seeded through
SeedSequence, so fixtures are stable across platforms and releases;
replicate streams should be derived by spawning from a parent
SeedSequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .car_spatial import ModelError, leroux_precision
from .graph import ArealGraph
from .st_ar import in_stationarity_triangle


@dataclass
class SimScenario:
    """True parameters for a synthetic dataset.

    beta includes the intercept as its first element; the design holds an
    all-ones column followed by iid standard-normal predictor columns.
    Temporal parameters are ignored when T = 1.
    """

    graph: ArealGraph
    beta: np.ndarray
    nu2: float
    tau2: float
    rho: float
    T: int = 1
    rho_1t: float = 0.0
    rho_2t: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        if self.nu2 < 0 or self.tau2 < 0:
            raise ModelError("variances must be non-negative")
        if not (0.0 <= self.rho < 1.0):
            raise ModelError("rho must be in [0, 1)")
        if self.T < 1:
            raise ModelError("T must be >= 1")
        if not in_stationarity_triangle(self.rho_1t, self.rho_2t):
            raise ModelError("(rho_1t, rho_2t) outside the stationarity triangle")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_car_field(graph: ArealGraph, rho: float, tau2: float, seed,
                     size: int | None = None) -> np.ndarray:
    """Draw from N(0, tau2 Q(rho)^-1) via Cholesky of the precision.

    Returns a K-vector, or a (size, K) array when size is given.  `seed`
    may be an integer or an existing Generator (for stream reuse).
    """
    if not (0.0 <= rho < 1.0):
        raise ModelError(f"rho must be in [0, 1) for a proper field, got {rho}")
    if tau2 < 0:
        raise ModelError("tau2 must be non-negative")
    rng = _rng(seed)
    K = graph.n_units
    n = 1 if size is None else int(size)
    if tau2 == 0:
        z = np.zeros((n, K))
        return z[0] if size is None else z
    Q = leroux_precision(graph, rho).toarray()
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise ModelError(
            f"Cholesky factorization of Q failed (rho={rho}, K={K})") from exc
    z = rng.standard_normal((n, K))
    # Q = L L'  =>  cov(L'^-1 z) = Q^-1
    fields = np.sqrt(tau2) * scipy.linalg.solve_triangular(
        L, z.T, lower=True, trans="T").T
    return fields[0] if size is None else fields


def generate_spatial_dataset(scenario: SimScenario):
    """Forward-simulate the spatial model; returns (y, X, truth dict)."""
    if scenario.T != 1:
        raise ModelError("spatial generation requires T = 1")
    rng = _rng(scenario.seed)
    K = scenario.graph.n_units
    p = scenario.beta.size
    X = np.column_stack([np.ones(K), rng.standard_normal((K, p - 1))]) \
        if p > 1 else np.ones((K, 1))
    phi = sample_car_field(scenario.graph, scenario.rho, scenario.tau2, rng)
    noise = (np.sqrt(scenario.nu2) * rng.standard_normal(K)
             if scenario.nu2 > 0 else np.zeros(K))
    y = X @ scenario.beta + phi + noise
    truth = {"beta": scenario.beta.copy(), "phi": phi, "nu2": scenario.nu2,
             "tau2": scenario.tau2, "rho": scenario.rho}
    return y, X, truth


def generate_st_dataset(scenario: SimScenario):
    """Forward-simulate the spatio-temporal AR(2) model.

    psi slices follow the recursion psi_1 = e_1, psi_2 = rho_1t psi_1 + e_2,
    psi_t = rho_1t psi_{t-1} + rho_2t psi_{t-2} + e_t with CAR innovations.
    Returns (y (K,T), X (K,T,p), truth dict).
    """
    if scenario.T < 3:
        raise ModelError("spatio-temporal generation requires T >= 3")
    rng = _rng(scenario.seed)
    graph = scenario.graph
    K, T = graph.n_units, scenario.T
    p = scenario.beta.size
    X = np.concatenate(
        [np.ones((K, T, 1)), rng.standard_normal((K, T, p - 1))], axis=2) \
        if p > 1 else np.ones((K, T, 1))
    innovations = sample_car_field(graph, scenario.rho, scenario.tau2, rng, size=T)
    psi = np.empty((K, T))
    psi[:, 0] = innovations[0]
    psi[:, 1] = scenario.rho_1t * psi[:, 0] + innovations[1]
    for t in range(2, T):
        psi[:, t] = (scenario.rho_1t * psi[:, t - 1]
                     + scenario.rho_2t * psi[:, t - 2] + innovations[t])
    noise = (np.sqrt(scenario.nu2) * rng.standard_normal((K, T))
             if scenario.nu2 > 0 else np.zeros((K, T)))
    y = np.einsum("ktp,p->kt", X, scenario.beta) + psi + noise
    truth = {"beta": scenario.beta.copy(), "psi": psi, "nu2": scenario.nu2,
             "tau2": scenario.tau2, "rho_s": scenario.rho,
             "rho_1t": scenario.rho_1t, "rho_2t": scenario.rho_2t}
    return y, X, truth
