"""Exploratory spatial data analysis.

Pearson correlation screening and global Moran's I with permutation
inference.  Permutations use an explicit Fisher-Yates shuffle driven by a
seeded 64-bit generator; each permutation index derives an independent
substream from (seed, index), so serial and parallel runs agree exactly.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .graph import ArealGraph


class EsdaError(ValueError):
    pass


@dataclass(frozen=True)
class MoranResult:
    statistic: float
    expected_null: float
    p_value: float
    n_permutations: int
    weight_scheme: str


def pearson_matrix(columns, names=None) -> np.ndarray:
    """Symmetric Pearson correlation matrix of the given columns.

    columns: (n, p) array or sequence of length-n arrays.  Constant columns
    are rejected by name.
    """
    if isinstance(columns, np.ndarray) and columns.ndim == 2:
        X = np.asarray(columns, dtype=float)
    else:
        X = np.column_stack([np.asarray(c, dtype=float).ravel() for c in columns])
    if names is None:
        names = [f"col{j}" for j in range(X.shape[1])]
    for j, name in enumerate(names):
        if np.ptp(X[:, j]) == 0:
            raise EsdaError(f"constant column {name!r} has no correlation")
    R = np.corrcoef(X, rowvar=False)
    R = np.clip((R + R.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R


def _weights(graph: ArealGraph, scheme: str):
    """Edge arrays (i, j, w_ij) over ordered pairs, plus S0 = sum of weights."""
    if scheme not in ("binary", "row-standardized"):
        raise EsdaError(f"unknown weight scheme: {scheme!r}")
    if graph.n_edges == 0:
        raise EsdaError("Moran's I needs a graph with at least one edge")
    ii, jj = [], []
    for i, j in graph.edges:
        ii.extend((i, j))
        jj.extend((j, i))
    ii = np.array(ii, dtype=np.intp)
    jj = np.array(jj, dtype=np.intp)
    if scheme == "binary":
        w = np.ones(len(ii))
    else:
        deg = graph.degrees.astype(float)
        w = 1.0 / deg[ii]
    return ii, jj, w, float(w.sum())


def morans_i(values, graph: ArealGraph, scheme: str = "row-standardized") -> float:
    """Global Moran's I: (K/S0) * sum_ki w_ki (y_k - ybar)(y_i - ybar) / sum_k (y_k - ybar)^2."""
    y = np.asarray(values, dtype=float).ravel()
    if y.size != graph.n_units:
        raise EsdaError(f"values length {y.size} != K={graph.n_units}")
    if np.ptp(y) == 0:
        raise EsdaError("Moran's I undefined for constant values")
    ii, jj, w, s0 = _weights(graph, scheme)
    z = y - y.mean()
    cross = float(np.sum(w * z[ii] * z[jj]))
    return (graph.n_units / s0) * cross / float(np.sum(z * z))


def _fisher_yates(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = values.copy()
    for j in range(out.size - 1, 0, -1):
        i = int(rng.integers(0, j + 1))
        out[i], out[j] = out[j], out[i]
    return out


def _perm_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def permutation_pvalue(
    values,
    graph: ArealGraph,
    scheme: str = "row-standardized",
    n_permutations: int = 999,
    seed: int = 0,
    alternative: str = "greater",
    threads: int = 1,
) -> MoranResult:
    """Permutation test for Moran's I.

    One-sided positive-autocorrelation p-value
    p = (1 + #{permuted I >= observed}) / (n_permutations + 1); the
    two-sided variant doubles the smaller tail.  Deterministic given seed,
    independent of thread count.
    """
    if n_permutations < 99:
        raise EsdaError("n_permutations must be >= 99")
    if alternative not in ("greater", "two-sided"):
        raise EsdaError(f"unknown alternative: {alternative!r}")
    y = np.asarray(values, dtype=float).ravel()
    observed = morans_i(y, graph, scheme)

    def one(index: int) -> float:
        return morans_i(_fisher_yates(y, _perm_rng(seed, index)), graph, scheme)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            perms = np.fromiter(pool.map(one, range(n_permutations)), dtype=float)
    else:
        perms = np.fromiter(map(one, range(n_permutations)), dtype=float)

    n_ge = int(np.sum(perms >= observed))
    if alternative == "greater":
        p = (1 + n_ge) / (n_permutations + 1)
    else:
        n_le = int(np.sum(perms <= observed))
        p = min(1.0, 2.0 * min(1 + n_ge, 1 + n_le) / (n_permutations + 1))
    return MoranResult(
        statistic=observed,
        expected_null=-1.0 / (graph.n_units - 1),
        p_value=p,
        n_permutations=n_permutations,
        weight_scheme=scheme,
    )
