"""Kronecker-product utilities and the recursive rank-one measurement split.

Conventions
-----------
Kronecker products are taken left to right, so for ``x = x_1 (x) x_2`` the
index of ``x_1`` varies slowest.  Matricization is column-major: a vector of
length ``P * Q`` maps to a ``P x Q`` matrix with ``Y[r, c] = y[c * P + r]``,
which turns ``y = a (x) b`` into ``Y = b a^T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np

from .errors import DecompositionError, DimensionError

__all__ = [
    "KroneckerDictionary",
    "FactorChain",
    "kron_vectors",
    "kron_matvec",
    "kron_operator_matvec",
    "vec_to_matrix",
    "rank_one_approx",
    "decompose_chain",
    "canonical_chain",
    "phase_align",
]


def kron_vectors(factors: Sequence[np.ndarray]) -> np.ndarray:
    """Kronecker product of a list of vectors, left factor first."""
    if len(factors) == 0:
        raise ValueError("kron_vectors needs at least one factor")
    vecs = [np.ravel(np.asarray(f)) for f in factors]
    return reduce(lambda a, b: np.multiply.outer(a, b).ravel(), vecs)


def kron_operator_matvec(mats: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Compute ``(A_1 (x) ... (x) A_I) x`` without forming the product.

    Each pass contracts the slowest remaining mode and rotates it to the back,
    so after ``I`` passes the output is in standard Kronecker order.
    """
    x = np.asarray(x)
    ncols = [a.shape[1] for a in mats]
    if x.size != int(np.prod(ncols)):
        raise DimensionError(
            f"vector of length {x.size} does not match operator with {int(np.prod(ncols))} columns"
        )
    out = x.ravel()
    for a in mats:
        out = (a @ out.reshape(a.shape[1], -1)).T.ravel()
    return out


@dataclass(frozen=True)
class KroneckerDictionary:
    """Dictionary ``H = H_1 (x) ... (x) H_I`` kept in factored form."""

    factors: tuple

    def __init__(self, factors):
        mats = tuple(np.atleast_2d(np.asarray(f)) for f in factors)
        if len(mats) == 0:
            raise ValueError("a Kronecker dictionary needs at least one factor")
        for m in mats:
            if m.ndim != 2 or 0 in m.shape:
                raise DimensionError(f"factor of shape {m.shape} is not a non-empty matrix")
            if not np.all(np.isfinite(m)):
                raise ValueError("dictionary factors must be finite")
        object.__setattr__(self, "factors", mats)

    def __len__(self):
        return len(self.factors)

    @property
    def row_dims(self) -> list[int]:
        return [m.shape[0] for m in self.factors]

    @property
    def col_dims(self) -> list[int]:
        return [m.shape[1] for m in self.factors]

    @property
    def shape(self) -> tuple[int, int]:
        return int(np.prod(self.row_dims)), int(np.prod(self.col_dims))

    @property
    def dtype(self):
        return np.result_type(*self.factors)

    def matvec(self, x):
        return kron_operator_matvec(self.factors, x)

    def rmatvec(self, y):
        """Adjoint product ``H^H y``."""
        return kron_operator_matvec([m.conj().T for m in self.factors], y)

    def to_dense(self) -> np.ndarray:
        return reduce(np.kron, self.factors)

    def frobenius_sq(self) -> float:
        return float(np.prod([np.sum(np.abs(m) ** 2) for m in self.factors]))

    def columns(self, indices) -> np.ndarray:
        """Materialize the columns at flat ``indices`` (shape ``M x len(indices)``)."""
        idx = np.atleast_1d(np.asarray(indices, dtype=np.intp))
        sub = np.unravel_index(idx, self.col_dims)
        out = self.factors[0][:, sub[0]]
        for m, s in zip(self.factors[1:], sub[1:]):
            part = m[:, s]
            out = (out[:, None, :] * part[None, :, :]).reshape(-1, idx.size)
        return out

    def gram(self, indices) -> np.ndarray:
        """Gram matrix ``H_A^H H_A`` of the columns at flat ``indices``."""
        idx = np.atleast_1d(np.asarray(indices, dtype=np.intp))
        sub = np.unravel_index(idx, self.col_dims)
        out = np.ones((idx.size, idx.size), dtype=self.dtype)
        for m, s in zip(self.factors, sub):
            g = m.conj().T @ m
            out = out * g[np.ix_(s, s)]
        return out


@dataclass(frozen=True)
class FactorChain:
    """Ordered Kronecker factors with the metadata of the split that produced them.

    ``singular_values[j]`` and ``residuals[j]`` belong to rank-one step ``j``;
    both are empty when the chain was not built by :func:`decompose_chain`.
    """

    factors: tuple
    singular_values: tuple = field(default=())
    residuals: tuple = field(default=())

    def __post_init__(self):
        facs = tuple(np.ravel(np.asarray(f)) for f in self.factors)
        if len(facs) == 0:
            raise ValueError("a factor chain needs at least one factor")
        for f in facs:
            if f.size == 0 or not np.all(np.isfinite(f)):
                raise ValueError("chain factors must be non-empty and finite")
        object.__setattr__(self, "factors", facs)

    def __len__(self):
        return len(self.factors)

    def __getitem__(self, i):
        return self.factors[i]

    @property
    def dims(self) -> list[int]:
        return [f.size for f in self.factors]

    def assemble(self) -> np.ndarray:
        return kron_vectors(self.factors)

    def is_canonical(self, atol=1e-10) -> bool:
        for f in self.factors[:-1]:
            if abs(np.linalg.norm(f) - 1.0) > atol:
                return False
            k = int(np.argmax(np.abs(f)))
            if abs(np.imag(f[k])) > atol or np.real(f[k]) < 0:
                return False
        return True


def phase_align(v: np.ndarray) -> tuple[np.ndarray, complex]:
    """Rotate ``v`` so its largest-modulus entry is real and non-negative.

    Returns the rotated vector and the unit phase ``p`` with ``v = p * out``.
    Ties go to the lowest index.
    """
    v = np.asarray(v)
    k = int(np.argmax(np.abs(v)))
    if v[k] == 0:
        return v.copy(), 1.0
    p = v[k] / abs(v[k])
    if np.isrealobj(v):
        p = float(np.sign(p))
    return v / p, p


def canonical_chain(factors: Sequence[np.ndarray], **meta) -> FactorChain:
    """Rescale factors so all but the last are unit-norm and phase-aligned.

    The product is unchanged.  If any factor is zero the whole chain is
    returned as zeros, since no scale can be assigned.
    """
    facs = [np.ravel(np.asarray(f)) for f in factors]
    if any(not np.any(f) for f in facs):
        dtype = np.result_type(*facs)
        return FactorChain(tuple(np.zeros(f.size, dtype=dtype) for f in facs), **meta)
    out = []
    scale = 1.0
    for f in facs[:-1]:
        nrm = np.linalg.norm(f)
        unit, p = phase_align(f / nrm)
        out.append(unit)
        scale = scale * nrm * p
    out.append(facs[-1] * scale)
    return FactorChain(tuple(out), **meta)


def kron_matvec(dictionary: KroneckerDictionary, x_factors) -> np.ndarray:
    """``(H_1 (x) ... (x) H_I)(x_1 (x) ... (x) x_I)`` computed as ``(x)(H_i x_i)``."""
    facs = x_factors.factors if isinstance(x_factors, FactorChain) else tuple(x_factors)
    if len(facs) != len(dictionary):
        raise DimensionError(f"{len(facs)} factors for a {len(dictionary)}-factor dictionary")
    parts = []
    for i, (h, x) in enumerate(zip(dictionary.factors, facs)):
        x = np.ravel(np.asarray(x))
        if h.shape[1] != x.size:
            raise DimensionError(f"factor {i}: matrix has {h.shape[1]} columns, vector has {x.size}")
        parts.append(h @ x)
    return kron_vectors(parts)


def vec_to_matrix(y: np.ndarray, inner_rows: int, outer_cols: int) -> np.ndarray:
    """Column-major inverse of ``vec``: ``Y[r, c] = y[c * inner_rows + r]``."""
    y = np.ravel(np.asarray(y))
    if y.size != inner_rows * outer_cols:
        raise DimensionError(f"cannot reshape length {y.size} into {inner_rows} x {outer_cols}")
    return y.reshape(outer_cols, inner_rows).T


def rank_one_approx(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Best Frobenius rank-one fit ``M ~ left @ right_unit.T``.

    ``right_unit`` is unit-norm with its largest entry real and non-negative;
    ``left`` absorbs the singular value and the compensating phase.

    Returns
    -------
    left, right_unit, residual_fro
    """
    M = np.asarray(M)
    if M.ndim != 2:
        raise DimensionError("rank_one_approx expects a matrix")
    if not np.any(M):
        raise DecompositionError("rank-one direction undefined for an all-zero matrix")
    u, s, vh = np.linalg.svd(M, full_matrices=False)
    # M ~ s0 u0 vh0 = left right^T with right = vh0
    right, p = phase_align(vh[0])
    left = s[0] * u[:, 0] * p
    resid = float(np.linalg.norm(M - np.outer(left, right)))
    return left, right, resid


def decompose_chain(y: np.ndarray, dims: Sequence[int]) -> FactorChain:
    """Split ``y`` into ``I`` Kronecker factors by ``I - 1`` rank-one steps.

    Step ``j`` matricizes the running remainder as
    ``prod(dims[j+1:]) x dims[j]``; its unit right factor becomes factor ``j``
    and the scaled left factor is carried forward.  The last factor holds all
    of the magnitude and phase.
    """
    dims = [int(d) for d in dims]
    y = np.ravel(np.asarray(y))
    if len(dims) < 2:
        raise ValueError("decompose_chain needs at least two factors")
    if any(d < 1 for d in dims):
        raise DimensionError(f"dims must be positive, got {dims}")
    if y.size != int(np.prod(dims)):
        raise DimensionError(f"length {y.size} does not match prod(dims) = {int(np.prod(dims))}")
    if not np.any(y):
        raise DecompositionError("cannot decompose a zero vector")

    factors, svals, resids = [], [], []
    rest = y
    for j in range(len(dims) - 1):
        inner = int(np.prod(dims[j + 1:]))
        left, right, res = rank_one_approx(vec_to_matrix(rest, inner, dims[j]))
        factors.append(right)
        svals.append(float(np.linalg.norm(left)))
        resids.append(res)
        rest = left
    factors.append(rest)
    return FactorChain(tuple(factors), tuple(svals), tuple(resids))
