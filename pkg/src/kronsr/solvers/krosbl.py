"""SBL with a Kronecker-structured prior variance (AM- and SVD-KroSBL)."""

from __future__ import annotations

import time

import numpy as np

from ..errors import NumericalError
from ..kron import KroneckerDictionary, decompose_chain, kron_operator_matvec
from .config import GammaChain, SolverConfig, SparseEstimate, support_of

_LOG_PI = np.log(np.pi)


def _normalize(factors):
    """Unit-norm every factor but the last, pushing the scale onto the last."""
    facs = [np.maximum(np.asarray(f, dtype=float), 0.0) for f in factors]
    if any(not np.any(f) for f in facs):
        return [np.zeros_like(f) for f in facs]
    scale = 1.0
    out = []
    for f in facs[:-1]:
        n = np.linalg.norm(f)
        out.append(f / n)
        scale *= n
    out.append(facs[-1] * scale)
    return out


def _check_target(d, dims):
    d = np.asarray(d, dtype=float).ravel()
    if d.size != int(np.prod(dims)):
        raise ValueError(f"length {d.size} does not match prod(dims) = {int(np.prod(dims))}")
    if np.any(d < 0):
        raise ValueError("hyperparameter target must be non-negative")
    if not np.any(d):
        raise ValueError("cannot project an all-zero hyperparameter vector")
    return d


def gamma_project_svd(d, dims) -> GammaChain:
    """Kronecker projection of ``d`` by the recursive rank-one chain.

    Sign flips left by the SVD are removed by the phase rule (largest entry
    positive); whatever small negative entries remain are clamped to zero.
    """
    d = _check_target(d, dims)
    chain = decompose_chain(d, dims)
    return GammaChain(tuple(_normalize(np.real(f) for f in chain.factors)))


def gamma_project_am(d, dims, iters: int, init=None) -> GammaChain:
    """Alternating least-squares fit ``d ~ (x) gamma_i``.

    Each pass updates every factor in turn with its closed-form least-squares
    solution given the others.  ``init`` defaults to normalized all-ones.
    """
    dims = [int(n) for n in dims]
    d = _check_target(d, dims)
    if init is None:
        facs = [np.ones(n) / np.sqrt(n) for n in dims]
    else:
        facs = [np.asarray(f, dtype=float).copy() for f in init]
    T = d.reshape(dims)
    I = len(dims)
    for _ in range(iters):
        for i in range(I):
            denom = 1.0
            t = T
            for j in reversed(range(I)):
                if j == i:
                    continue
                t = np.tensordot(t, facs[j], axes=([j], [0]))
                denom *= float(facs[j] @ facs[j])
            if denom == 0:
                facs = [np.zeros(n) for n in dims]
                break
            facs[i] = np.maximum(t / denom, 0.0)
        facs = _normalize(facs)
    return GammaChain(tuple(facs))


def _structured_posterior(factors, gammas, s2, y):
    """Posterior moments for ``Gamma = diag((x) gamma_i)``.

    With a Kronecker prior ``C = s2 I + (x) C_i`` where ``C_i = H_i Gamma_i H_i^H``,
    so eigendecomposing each small ``C_i`` diagonalizes ``C`` exactly.
    """
    Us, lams, Bs = [], [], []
    for h, g in zip(factors, gammas):
        Ci = (h * g) @ h.conj().T
        lam, U = np.linalg.eigh(0.5 * (Ci + Ci.conj().T))
        Us.append(U)
        lams.append(np.maximum(lam, 0.0))
        Bs.append(U.conj().T @ h)
    D = s2 + _kron_all(lams)
    z = kron_operator_matvec([U.conj().T for U in Us], y)
    w = z / D
    gamma = _kron_all(gammas)
    mu = gamma * kron_operator_matvec([B.conj().T for B in Bs], w)
    quad = kron_operator_matvec([(np.abs(B) ** 2).T for B in Bs], 1.0 / D)
    dsig = gamma - gamma ** 2 * quad
    ll = -(y.size * _LOG_PI + float(np.sum(np.log(D))) + float(np.sum(np.abs(z) ** 2 / D)))
    return mu, dsig, ll, gamma


def _kron_all(vecs):
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v).ravel()
    return out


def krosbl(dictionary: KroneckerDictionary, y, cfg: SolverConfig, mode: str = "svd") -> SparseEstimate:
    """KroSBL: EM where each unstructured variance update is projected onto
    a Kronecker product before the next iteration.

    ``mode`` is ``"svd"`` (rank-one chain) or ``"am"`` (alternating least
    squares warm-started from the previous iterate).  Pruning works per
    factor entry, which keeps the structure, and is irreversible.
    """
    t0 = time.perf_counter()
    mode = mode.lower()
    if mode not in ("svd", "am"):
        raise ValueError(f"unknown KroSBL mode {mode!r}; use 'svd' or 'am'")
    if not isinstance(dictionary, KroneckerDictionary):
        dictionary = KroneckerDictionary(dictionary)
    factors = dictionary.factors
    M, N = dictionary.shape
    dims = dictionary.col_dims
    y = np.ravel(np.asarray(y))
    if y.size != M:
        raise ValueError(f"dictionary has {M} rows but y has length {y.size}")
    s2 = float(cfg.noise_variance)
    if s2 <= 0:
        raise ValueError("krosbl requires noise_variance > 0")
    dtype = np.result_type(y, dictionary.dtype, float)

    if not np.any(y):
        return SparseEstimate(np.zeros(N, dtype=dtype), np.zeros(0, dtype=np.intp),
                              wall_time_s=time.perf_counter() - t0,
                              diagnostics={"gamma": np.zeros(N), "loglik": [], "converged": True})

    scale = float(np.real(np.vdot(y, y))) / dictionary.frobenius_sq()
    chain = [np.ones(n) / np.sqrt(n) for n in dims[:-1]]
    chain.append(np.ones(dims[-1]) * scale * float(np.prod(np.sqrt(dims[:-1]))))
    masks = [np.ones(n, dtype=bool) for n in dims]

    history = []
    converged = False
    it = 0
    gamma = _kron_all(chain)
    for it in range(1, cfg.max_em_iters + 1):
        mu, dsig, ll, gamma = _structured_posterior(factors, chain, s2, y)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(dsig)) and np.isfinite(ll)):
            raise NumericalError(f"non-finite KroSBL iterate at iteration {it}", iteration=it)
        history.append(ll)
        d = np.abs(mu) ** 2 + np.maximum(dsig, 0.0)
        if not np.any(d):
            chain = [np.zeros(n) for n in dims]
            converged = True
            break
        if mode == "svd":
            new = list(gamma_project_svd(d, dims).factors)
        else:
            new = list(gamma_project_am(d, dims, cfg.am_inner_iters, init=chain).factors)
        for i, f in enumerate(new):
            f = np.where(masks[i], f, 0.0)
            top = f.max()
            masks[i] &= f > cfg.prune_threshold * top if top > 0 else False
            new[i] = np.where(masks[i], f, 0.0)
        new = _normalize(new)
        new_gamma = _kron_all(new)
        change = np.linalg.norm(new_gamma - gamma) / np.linalg.norm(gamma)
        chain = new
        if change < cfg.em_tol:
            converged = True
            break

    if any(not np.any(f) for f in chain):
        x = np.zeros(N, dtype=dtype)
        gamma = np.zeros(N)
    else:
        x, _, _, gamma = _structured_posterior(factors, chain, s2, y)
        x = x.astype(dtype, copy=False)
    return SparseEstimate(x, support_of(x), iterations_used=it,
                          wall_time_s=time.perf_counter() - t0,
                          diagnostics={"gamma": gamma, "gamma_chain": GammaChain(tuple(chain)),
                                       "loglik": history, "converged": converged})
