"""Decomposition-based sparse recovery.

The measurement is split into one vector per dictionary factor by recursive
rank-one approximations; each factor problem ``y_i = H_i x_i + n_i`` is then
solved on its own and the estimate is the Kronecker product of the parts.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, Union

import numpy as np

from ..errors import SolverError
from ..kron import FactorChain, KroneckerDictionary, canonical_chain, decompose_chain
from .config import SolverConfig, SparseEstimate
from .omp import omp
from .sbl import sbl

InnerSolver = Callable[[np.ndarray, np.ndarray, SolverConfig], SparseEstimate]

INNER_SOLVERS = {"omp": omp, "sbl": sbl}


def per_factor_noise_variance(cfg: SolverConfig, chain: FactorChain, factor_index: int) -> float:
    """Noise variance handed to the inner solver of factor ``factor_index``.

    Step ``j`` of the split fits a rank-one matrix to a ``P x Q`` array; its
    residual has ``(P - 1)(Q - 1)`` degrees of freedom, which gives a per-entry
    noise estimate ``e_j``.  Unit-norm factors come from step ``j = i`` and
    see that noise divided by the step's squared singular value; the last
    factor is the scaled left vector of the final step and sees ``e_j``
    directly.  The result never drops below ``cfg.noise_floor``, and a
    configured noise variance of zero returns the floor.
    """
    I = len(chain)
    if not 0 <= factor_index < I:
        raise IndexError(f"factor index {factor_index} out of range for {I} factors")
    floor = cfg.noise_floor
    if cfg.noise_variance == 0:
        return floor
    if not chain.residuals:
        return max(floor, float(cfg.noise_variance))
    dims = chain.dims
    step = min(factor_index, I - 2)
    rows = int(np.prod(dims[step + 1:]))
    cols = dims[step]
    dof = (rows - 1) * (cols - 1)
    if dof > 0:
        per_entry = chain.residuals[step] ** 2 / dof
    else:
        per_entry = float(cfg.noise_variance)
    if factor_index < I - 1:
        per_entry = per_entry / chain.singular_values[step] ** 2
    return max(floor, float(per_entry))


def _resolve(inner) -> InnerSolver:
    if callable(inner):
        return inner
    try:
        return INNER_SOLVERS[str(inner).lower()]
    except KeyError:
        raise ValueError(f"unknown inner solver {inner!r}; choose from {sorted(INNER_SOLVERS)}") from None


def dsr(dictionary: KroneckerDictionary,
        y,
        inner: Union[str, InnerSolver] = "sbl",
        cfg: SolverConfig = SolverConfig(),
        workers: int = 1) -> SparseEstimate:
    """Recover ``x = (x) x_i`` from ``y ~ ((x) H_i) x``.

    Parameters
    ----------
    dictionary : KroneckerDictionary
    y : array_like
        Measurement of length ``prod(dictionary.row_dims)``.
    inner : {"omp", "sbl"} or callable
        Solver for each factor problem, called as ``inner(H_i, y_i, cfg_i)``
        where ``cfg_i`` carries the factor's noise variance.
    cfg : SolverConfig
    workers : int
        Factor problems are independent; more than one worker solves them
        on a thread pool.  Results keep factor order.

    Returns
    -------
    SparseEstimate
        With ``x_factors`` set.  Factor estimates are zeroed outside their
        own supports, so ``support`` is exactly the Kronecker composition of
        the factor supports.
    """
    t0 = time.perf_counter()
    if not isinstance(dictionary, KroneckerDictionary):
        dictionary = KroneckerDictionary(dictionary)
    solver = _resolve(inner)
    y = np.ravel(np.asarray(y))
    chain = decompose_chain(y, dictionary.row_dims)

    def solve(i):
        cfg_i = replace(cfg, noise_variance=per_factor_noise_variance(cfg, chain, i))
        try:
            return solver(dictionary.factors[i], chain.factors[i], cfg_i)
        except Exception as exc:
            raise SolverError(f"inner solver failed on factor {i}: {exc}", factor_index=i) from exc

    idx = range(len(dictionary))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(solve, idx))
    else:
        parts = [solve(i) for i in idx]

    pieces = []
    for est in parts:
        xi = np.zeros_like(est.x_full)
        xi[est.support] = est.x_full[est.support]
        pieces.append(xi)
    x_chain = canonical_chain(pieces)
    x_full = x_chain.assemble()
    if all(p.support.size for p in parts):
        sub = np.meshgrid(*[p.support for p in parts], indexing="ij")
        support = np.sort(np.ravel_multi_index([s.ravel() for s in sub], dictionary.col_dims))
    else:
        support = np.zeros(0, dtype=np.intp)
    return SparseEstimate(
        x_full, support,
        iterations_used=max(p.iterations_used for p in parts),
        wall_time_s=time.perf_counter() - t0,
        x_factors=x_chain,
        diagnostics={"measurement_chain": chain, "factor_estimates": parts},
    )
