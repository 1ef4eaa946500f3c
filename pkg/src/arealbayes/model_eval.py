"""Model comparison, predictor selection, and MCMC diagnostics.

DIC and WAIC from draw deviances and pointwise log-likelihoods, greedy
bidirectional stepwise selection over candidate predictors, residual
Moran diagnostics, and per-parameter convergence statistics (effective
sample size, Geweke z, split-chain PSRF).
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import esda
from .car_spatial import Hyperpriors, MCMCConfig, ModelError, fit_spatial
from .graph import ArealGraph


@dataclass(frozen=True)
class ConvergenceStat:
    ess: float
    geweke_z: float
    psrf: float
    degenerate: bool = False


@dataclass
class FitSummary:
    dic: float
    p_d: float
    waic: float
    p_waic: float
    table: dict  # parameter -> dict(mean, q2.5, q97.5, ess, geweke_z)


# ---------------------------------------------------------------------------
# Information criteria


def dic(deviances, deviance_at_mean: float):
    """(DIC, pD): pD = mean(deviance) - deviance(posterior mean)."""
    dev = np.asarray(deviances, dtype=float)
    if dev.size < 2:
        raise ModelError("DIC needs at least 2 draws")
    if not (np.all(np.isfinite(dev)) and math.isfinite(deviance_at_mean)):
        raise ModelError("non-finite deviance")
    mean_dev = float(dev.mean())
    p_d = mean_dev - float(deviance_at_mean)
    return mean_dev + p_d, p_d


def waic(loglik, block_size: int = 256):
    """(WAIC, pWAIC) from a draws x observations log-likelihood matrix.

    lppd uses log-sum-exp stabilization; the variance penalty is computed
    with a streaming Welford pass over draw blocks, so disk-backed
    (memmap) matrices never load fully into memory.
    """
    S, n = loglik.shape
    if S < 2:
        raise ModelError("WAIC needs at least 2 draws")
    running_max = np.full(n, -np.inf)
    running_sumexp = np.zeros(n)
    count = 0
    mean = np.zeros(n)
    m2 = np.zeros(n)
    for start in range(0, S, block_size):
        block = np.asarray(loglik[start:start + block_size], dtype=float)
        if not np.all(np.isfinite(block)):
            raise ModelError("non-finite pointwise log-likelihood entry")
        # streaming log-sum-exp
        block_max = block.max(axis=0)
        new_max = np.maximum(running_max, block_max)
        running_sumexp = running_sumexp * np.exp(running_max - new_max) + \
            np.exp(block - new_max).sum(axis=0)
        running_max = new_max
        # blocked Welford update for the per-observation variance
        b = block.shape[0]
        block_mean = block.mean(axis=0)
        block_m2 = ((block - block_mean) ** 2).sum(axis=0)
        if count == 0:
            mean, m2, count = block_mean, block_m2, b
        else:
            delta = block_mean - mean
            total = count + b
            mean = mean + delta * b / total
            m2 = m2 + block_m2 + delta ** 2 * count * b / total
            count = total
    lppd = float(np.sum(running_max + np.log(running_sumexp / S)))
    p_waic = float(np.sum(m2 / (count - 1)))
    return -2.0 * (lppd - p_waic), p_waic


# ---------------------------------------------------------------------------
# Convergence diagnostics


def _autocorrelations(x: np.ndarray) -> np.ndarray:
    n = x.size
    z = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(z, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    return acov / acov[0]


def effective_sample_size(x: np.ndarray) -> float:
    """ESS by Geyer's initial-positive-sequence truncation."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    rho = _autocorrelations(x)
    tau = 1.0
    m = 0
    while 2 * m + 1 < n:
        gamma = rho[2 * m] + rho[2 * m + 1]
        if gamma <= 0:
            break
        if m == 0:
            tau = 2 * gamma - 1.0  # rho_0 = 1 contributes once
        else:
            tau += 2 * gamma
        m += 1
    return float(min(n, n / max(tau, 1e-12)))


def geweke_z(x: np.ndarray, first: float = 0.1, last: float = 0.5) -> float:
    """z-score comparing the first 10% and last 50% of the chain, with
    autocorrelation-adjusted standard errors."""
    x = np.asarray(x, dtype=float).ravel()
    a = x[: max(2, int(first * x.size))]
    b = x[-max(2, int(last * x.size)):]
    se2 = 0.0
    for seg in (a, b):
        ess = effective_sample_size(seg)
        se2 += seg.var(ddof=1) / max(ess, 1.0)
    if se2 == 0:
        return 0.0
    return float((a.mean() - b.mean()) / math.sqrt(se2))


def split_psrf(chains) -> float:
    """Potential scale reduction from split halves of one or more chains."""
    halves = []
    for chain in np.atleast_2d(np.asarray(chains, dtype=float)):
        mid = chain.size // 2
        halves.append(chain[:mid])
        halves.append(chain[mid: 2 * mid])
    m = len(halves)
    n = min(h.size for h in halves)
    halves = np.array([h[:n] for h in halves])
    chain_means = halves.mean(axis=1)
    w = float(np.mean(halves.var(axis=1, ddof=1)))
    b = n * float(chain_means.var(ddof=1))
    if w == 0:
        return float("inf") if b > 0 else 1.0
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def convergence(draws, min_draws: int = 100) -> dict:
    """Per-parameter ConvergenceStat for a dict of chains.

    Each value may be a 1-d chain or an (m, n) stack of chains with equal
    length; multi-chain input feeds the PSRF while ESS and Geweke use the
    pooled concatenation.
    """
    out = {}
    for name, chain in draws.items():
        arr = np.atleast_2d(np.asarray(chain, dtype=float))
        pooled = arr.ravel()
        if pooled.size < min_draws:
            raise ModelError(
                f"parameter {name!r} has {pooled.size} draws; need >= {min_draws}")
        if np.ptp(pooled) == 0:
            out[name] = ConvergenceStat(ess=float("nan"), geweke_z=0.0,
                                        psrf=1.0, degenerate=True)
            continue
        ess = sum(effective_sample_size(c) for c in arr)
        out[name] = ConvergenceStat(ess=float(ess),
                                    geweke_z=geweke_z(pooled),
                                    psrf=split_psrf(arr))
    return out


# ---------------------------------------------------------------------------
# Fit summaries


def spatial_deviance_at_mean(fit, y, X) -> float:
    """Deviance at the posterior mean of (beta, phi, nu2) (DIC plug-in)."""
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(X, dtype=float) @ fit.beta.mean(axis=0) + fit.phi.mean(axis=0)
    nu2 = float(fit.nu2.mean())
    ll = -0.5 * (np.log(2.0 * math.pi * nu2) + (y - mu) ** 2 / nu2)
    return -2.0 * float(ll.sum())


def st_deviance_at_mean(fit, y) -> float:
    """Deviance at the posterior mean of (B, psi, nu2) (DIC plug-in)."""
    y = np.asarray(y, dtype=float)
    nu2 = float(fit.nu2.mean())
    resid = y.reshape(fit.fitted_mean.shape) - fit.fitted_mean
    ll = -0.5 * (np.log(2.0 * math.pi * nu2) + resid ** 2 / nu2)
    return -2.0 * float(ll.sum())


def summarize_fit(fit, deviance_at_mean: float) -> FitSummary:
    """Posterior mean/quantile/diagnostic table plus DIC and WAIC."""
    dic_value, p_d = dic(fit.deviances(), deviance_at_mean)
    waic_value, p_waic = waic(fit.loglik)
    table = {}
    stats = convergence(fit.parameter_draws(), min_draws=2)
    for name, chain in fit.parameter_draws().items():
        q_lo, q_hi = np.quantile(chain, [0.025, 0.975])
        table[name] = {
            "mean": float(np.mean(chain)),
            "q2.5": float(q_lo),
            "q97.5": float(q_hi),
            "ess": stats[name].ess,
            "geweke_z": stats[name].geweke_z,
        }
    return FitSummary(dic=dic_value, p_d=p_d, waic=waic_value, p_waic=p_waic,
                      table=table)


# ---------------------------------------------------------------------------
# Residual diagnostics and stepwise selection


def residual_moran(residuals, graph: ArealGraph, scheme: str = "row-standardized",
                   n_permutations: int = 999, seed: int = 0) -> esda.MoranResult:
    """Moran permutation test on posterior-mean residuals (delegates to esda)."""
    return esda.permutation_pvalue(residuals, graph, scheme=scheme,
                                   n_permutations=n_permutations, seed=seed)


def subset_seed(names) -> int:
    """Stable 64-bit seed from a predictor subset (order-independent)."""
    digest = hashlib.sha256("\x1f".join(sorted(names)).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _fit_subset(y, candidates, included, graph, hyper, config):
    names = list(included)
    X = np.column_stack([np.ones(graph.n_units)] +
                        [candidates[n] for n in names])
    cfg = replace(config, seed=subset_seed(names))
    fit = fit_spatial(y, X, graph, hyper, cfg, beta_names=["Intercept"] + names)
    dic_value, _ = dic(fit.deviances(), spatial_deviance_at_mean(fit, y, X))
    waic_value, _ = waic(fit.loglik)
    return dic_value, waic_value


def stepwise_select(y, candidates, graph: ArealGraph,
                    hyper: Hyperpriors = Hyperpriors(),
                    config: MCMCConfig = MCMCConfig(),
                    criterion: str = "dic", threshold: float = 2.0,
                    threads: int = 1):
    """Greedy bidirectional predictor selection starting from intercept-only.

    At each step every add of an excluded candidate and drop of an
    included one is refit (each with a seed hashed from its subset, so the
    search is deterministic and order-independent); the best move is kept
    if it lowers the configured criterion by more than `threshold`.
    Returns (chosen predictor names, trace) where trace rows are
    (step, action, predictor, dic, waic).
    """
    if criterion not in ("dic", "waic"):
        raise ModelError(f"unknown criterion: {criterion!r}")
    candidates = {name: np.asarray(col, dtype=float).ravel()
                  for name, col in candidates.items()}
    y = np.asarray(y, dtype=float).ravel()

    def evaluate(subset):
        try:
            return _fit_subset(y, candidates, subset, graph, hyper, config)
        except Exception as exc:
            raise ModelError(
                f"fit failed for predictor subset {sorted(subset)}: {exc}") from exc

    included: list = []
    d0, w0 = evaluate(included)
    current = d0 if criterion == "dic" else w0
    trace = [(0, "start", "(intercept)", d0, w0)]
    step = 0
    while True:
        step += 1
        moves = [("add", name, included + [name])
                 for name in candidates if name not in included]
        moves += [("drop", name, [n for n in included if n != name])
                  for n in included]
        if not moves:
            break
        subsets = [m[2] for m in moves]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(evaluate, subsets))
        else:
            results = [evaluate(s) for s in subsets]
        best = None
        for (action, name, subset), (d, w) in zip(moves, results):
            value = d if criterion == "dic" else w
            if best is None or value < best[0]:
                best = (value, action, name, subset, d, w)
        if best is None or best[0] >= current - threshold:
            break
        current, action, name = best[0], best[1], best[2]
        included = best[3]
        trace.append((step, action, name, best[4], best[5]))
    return included, trace
