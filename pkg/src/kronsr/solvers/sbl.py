"""Classic sparse Bayesian learning (EM on per-coefficient variances)."""

from __future__ import annotations

import time

import numpy as np
from scipy.linalg import cho_solve, lapack

from ..errors import NumericalError
from ..kron import KroneckerDictionary, kron_operator_matvec
from .config import SolverConfig, SparseEstimate, support_of

_LOG_PI = np.log(np.pi)


def _chol_inverse(C):
    """Cholesky-based inverse of a Hermitian PD matrix and its log-determinant."""
    potrf, potri = lapack.get_lapack_funcs(("potrf", "potri"), (C,))
    c, info = potrf(C, lower=True, clean=True)
    if info != 0:
        raise np.linalg.LinAlgError(f"potrf failed with info={info}")
    logdet = 2.0 * float(np.sum(np.log(np.real(np.diag(c)))))
    inv, info = potri(c, lower=True)
    if info != 0:
        raise np.linalg.LinAlgError(f"potri failed with info={info}")
    low = np.tril(inv)
    return low + np.tril(inv, -1).conj().T, logdet


def _nspace_stats(gram, Hy, g, s2, y_sq, M):
    """Posterior moments from the ``|A| x |A|`` system (few active columns).

    Uses ``Sigma = G^{1/2} (I + G^{1/2} H^H H G^{1/2} / s2)^{-1} G^{1/2}``,
    which stays well conditioned when some variances are tiny.
    """
    sq = np.sqrt(g)
    A = (sq[:, None] * gram * sq[None, :]) / s2
    A[np.diag_indices_from(A)] += 1.0
    Ainv, logdet_a = _chol_inverse(A)
    Sigma = sq[:, None] * Ainv * sq[None, :]
    mu = Sigma @ Hy / s2
    dsig = np.real(np.diag(Sigma))
    quad = (y_sq - float(np.real(np.vdot(Hy, mu)))) / s2
    ll = -(M * _LOG_PI + M * np.log(s2) + logdet_a + quad)
    return mu, dsig, ll


class _DensePosterior:
    def __init__(self, H):
        self.H = np.asarray(H)
        self.shape = self.H.shape
        self.dtype = self.H.dtype

    def frobenius_sq(self):
        return float(np.sum(np.abs(self.H) ** 2))

    def stats(self, active, g, s2, y):
        M = self.shape[0]
        Ha = self.H[:, active]
        if active.size <= M:
            return _nspace_stats(Ha.conj().T @ Ha, Ha.conj().T @ y, g, s2,
                                 float(np.real(np.vdot(y, y))), M)
        C = (Ha * g) @ Ha.conj().T
        C[np.diag_indices_from(C)] += s2
        L = np.linalg.cholesky(C)
        rhs = cho_solve((L, True), np.column_stack([y, Ha]), check_finite=False)
        Ciy, CiH = rhs[:, 0], rhs[:, 1:]
        mu = g * (Ha.conj().T @ Ciy)
        dsig = g - g ** 2 * np.real(np.sum(Ha.conj() * CiH, axis=0))
        logdet = 2.0 * float(np.sum(np.log(np.real(np.diag(L)))))
        ll = -(M * _LOG_PI + logdet + float(np.real(np.vdot(y, Ciy))))
        return mu, dsig, ll


class _KroneckerPosterior:
    """Posterior moments exploiting ``H = (x) H_i`` with an unstructured prior.

    ``H Gamma H^H`` and ``diag(H^H C^{-1} H)`` are both Kronecker matvecs on
    outer-product factors, so only the ``M x M`` inverse is dense work.
    """

    def __init__(self, dictionary: KroneckerDictionary):
        self.d = dictionary
        self.shape = dictionary.shape
        self.dtype = dictionary.dtype
        self._fwd = [np.einsum("an,bn->abn", h, h.conj()).reshape(-1, h.shape[1])
                     for h in dictionary.factors]
        self._adj = [k.conj().T for k in self._fwd]
        self._Hy_key = None

    def frobenius_sq(self):
        return self.d.frobenius_sq()

    def _reorder_pairs(self, v):
        rows = self.d.row_dims
        I = len(rows)
        t = v.reshape([m for r in rows for m in (r, r)])
        return t.transpose(list(range(0, 2 * I, 2)) + list(range(1, 2 * I, 2)))

    def stats(self, active, g, s2, y):
        M, N = self.shape
        if active.size <= M:
            if self._Hy_key is not y:
                self._Hy = self.d.rmatvec(y)
                self._Hy_key = y
            return _nspace_stats(self.d.gram(active), self._Hy[active], g, s2,
                                 float(np.real(np.vdot(y, y))), M)
        gfull = np.zeros(N)
        gfull[active] = g
        C = self._reorder_pairs(kron_operator_matvec(self._fwd, gfull)).reshape(M, M)
        C = 0.5 * (C + C.conj().T)
        C[np.diag_indices_from(C)] += s2
        Cinv, logdet = _chol_inverse(C)
        Ciy = Cinv @ y
        mu = g * self.d.rmatvec(Ciy)[active]
        I = len(self.d)
        rows = self.d.row_dims
        perm = [k for i in range(I) for k in (i, i + I)]
        vec = Cinv.reshape(rows + rows).transpose(perm).ravel()
        quad_diag = np.real(kron_operator_matvec(self._adj, vec))[active]
        dsig = g - g ** 2 * quad_diag
        ll = -(M * _LOG_PI + logdet + float(np.real(np.vdot(y, Ciy))))
        return mu, dsig, ll


def _engine(H):
    if isinstance(H, KroneckerDictionary):
        return _KroneckerPosterior(H)
    return _DensePosterior(H)


def sbl(H, y, cfg: SolverConfig) -> SparseEstimate:
    """Sparse Bayesian learning with EM hyperparameter updates and pruning.

    ``H`` may be a dense matrix or a :class:`KroneckerDictionary`; the latter
    keeps the prior unstructured but uses the dictionary's factorization for
    the heavy products.  Variances start at ``||y||^2 / ||H||_F^2`` and
    variances below ``prune_threshold * max(gamma)`` are removed for good.

    ``diagnostics["loglik"]`` holds the marginal log-likelihood of each
    iterate (complex Gaussian form) and ``diagnostics["pruned"]`` the number
    of variances removed after each iterate.  EM never lowers the likelihood;
    only a pruning step can.
    """
    t0 = time.perf_counter()
    engine = _engine(H)
    M, N = engine.shape
    y = np.ravel(np.asarray(y))
    if y.size != M:
        raise ValueError(f"dictionary has {M} rows but y has length {y.size}")
    s2 = float(cfg.noise_variance)
    if s2 <= 0:
        raise ValueError("sbl requires noise_variance > 0")
    dtype = np.result_type(y, engine.dtype, float)

    if not np.any(y):
        return SparseEstimate(np.zeros(N, dtype=dtype), np.zeros(0, dtype=np.intp),
                              wall_time_s=time.perf_counter() - t0,
                              diagnostics={"gamma": np.zeros(N), "loglik": [], "pruned": [],
                                           "converged": True})

    g = np.full(N, float(np.real(np.vdot(y, y))) / engine.frobenius_sq())
    active = np.arange(N)
    history, pruned = [], []
    converged = False
    it = 0
    for it in range(1, cfg.max_em_iters + 1):
        mu, dsig, ll = engine.stats(active, g, s2, y)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(dsig)) and np.isfinite(ll)):
            raise NumericalError(f"non-finite SBL iterate at iteration {it}", iteration=it)
        history.append(ll)
        new = np.abs(mu) ** 2 + np.maximum(dsig, 0.0)
        keep = new > cfg.prune_threshold * new.max()
        change = np.linalg.norm(np.where(keep, new, 0.0) - g) / np.linalg.norm(g)
        pruned.append(int(keep.size - np.count_nonzero(keep)))
        active, g = active[keep], new[keep]
        if active.size == 0 or change < cfg.em_tol:
            converged = True
            break

    x = np.zeros(N, dtype=dtype)
    if active.size:
        # posterior mean under the final hyperparameters
        x[active] = engine.stats(active, g, s2, y)[0]
    gamma = np.zeros(N)
    gamma[active] = g
    return SparseEstimate(x, support_of(x), iterations_used=it,
                          wall_time_s=time.perf_counter() - t0,
                          diagnostics={"gamma": gamma, "loglik": history, "pruned": pruned,
                                       "converged": converged})
