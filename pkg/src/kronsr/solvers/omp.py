from __future__ import annotations

import time

import numpy as np

from ..kron import KroneckerDictionary
from .config import SolverConfig, SparseEstimate, support_of


def _stopping_rule(cfg: SolverConfig, y, n_rows, n_cols):
    rules = [cfg.omp_sparsity is not None, cfg.omp_residual_tol is not None,
             cfg.omp_noise_margin is not None]
    if sum(rules) != 1:
        raise ValueError(
            "configure exactly one OMP stopping rule "
            "(omp_sparsity, omp_residual_tol or omp_noise_margin)"
        )
    max_atoms = min(n_rows, n_cols)
    tol = 0.0
    if cfg.omp_sparsity is not None:
        if cfg.omp_sparsity < 0:
            raise ValueError("omp_sparsity must be non-negative")
        max_atoms = min(max_atoms, int(cfg.omp_sparsity))
    elif cfg.omp_residual_tol is not None:
        tol = cfg.omp_residual_tol * np.linalg.norm(y)
    else:
        tol = cfg.omp_noise_margin * np.sqrt(n_rows * cfg.noise_variance)
    return max_atoms, tol


def omp(H, y, cfg: SolverConfig) -> SparseEstimate:
    """Orthogonal matching pursuit.

    Atoms are picked by normalized correlation ``|h_k^H r| / ||h_k||``, which
    is the atom giving the smallest one-step least-squares residual.  The
    coefficients on the selected set are refit by least squares each step.
    """
    t0 = time.perf_counter()
    if isinstance(H, KroneckerDictionary):
        H = H.to_dense()
    H = np.asarray(H)
    y = np.ravel(np.asarray(y))
    M, N = H.shape
    if y.size != M:
        raise ValueError(f"H has {M} rows but y has length {y.size}")
    max_atoms, tol = _stopping_rule(cfg, y, M, N)

    norms = np.linalg.norm(H, axis=0)
    usable = norms > 0
    inv_norms = np.where(usable, 1.0 / np.where(usable, norms, 1.0), 0.0)

    dtype = np.result_type(H, y, float)
    selected: list[int] = []
    coef = np.zeros(0, dtype=dtype)
    r = y.astype(dtype, copy=True)
    rank_deficient = False

    while len(selected) < max_atoms:
        rnorm = np.linalg.norm(r)
        if rnorm == 0 or rnorm <= tol:
            break
        score = np.abs(H.conj().T @ r) * inv_norms
        score[selected] = -np.inf
        k = int(np.argmax(score))
        if not np.isfinite(score[k]) or score[k] <= 0:
            break
        trial = selected + [k]
        Hs = H[:, trial]
        c, _, rank, _ = np.linalg.lstsq(Hs, y, rcond=None)
        if rank < len(trial):
            rank_deficient = True
            break
        selected, coef = trial, c
        r = y - Hs @ c

    x = np.zeros(N, dtype=dtype)
    if selected:
        x[selected] = coef
    support = support_of(x)
    diag = {"residual_norm": float(np.linalg.norm(r)), "rank_deficient": rank_deficient}
    return SparseEstimate(x, support, iterations_used=len(selected),
                          wall_time_s=time.perf_counter() - t0, diagnostics=diag)
