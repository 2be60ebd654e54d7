from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..kron import FactorChain, kron_vectors

#: Entries with ``|x_n| <= SUPPORT_RTOL * max|x|`` are not counted as support.
SUPPORT_RTOL = 1e-3
#: Lower bound on any noise variance handed to an inner solver.
NOISE_FLOOR = 1e-10


@dataclass(frozen=True)
class SolverConfig:
    """Tuning knobs shared by all solvers.

    OMP uses exactly one stopping rule: ``omp_sparsity`` (atom count),
    ``omp_residual_tol`` (``||r|| <= tol * ||y||``) or ``omp_noise_margin``
    (``||r|| <= margin * sqrt(M * noise_variance)``).
    """

    max_em_iters: int = 150
    em_tol: float = 1e-4
    prune_threshold: float = 1e-4
    noise_variance: float = 0.0
    omp_sparsity: Optional[int] = None
    omp_residual_tol: Optional[float] = None
    omp_noise_margin: Optional[float] = None
    am_inner_iters: int = 10
    noise_floor: float = NOISE_FLOOR

    def __post_init__(self):
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be >= 1")
        if not 0 < self.prune_threshold < 1:
            raise ValueError("prune_threshold must lie in (0, 1)")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        if self.em_tol <= 0:
            raise ValueError("em_tol must be positive")
        if self.am_inner_iters < 0:
            raise ValueError("am_inner_iters must be non-negative")


@dataclass
class SparseEstimate:
    """A recovered coefficient vector.

    ``support`` holds sorted flat indices.  For decomposition results
    ``x_factors`` is set and ``x_full`` equals its Kronecker product.
    """

    x_full: np.ndarray
    support: np.ndarray
    iterations_used: int = 0
    wall_time_s: float = 0.0
    x_factors: Optional[FactorChain] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def support_set(self) -> set:
        return set(int(i) for i in self.support)


@dataclass(frozen=True)
class GammaChain:
    """Non-negative hyperparameter factors; all but the last are unit-norm."""

    factors: tuple

    def __post_init__(self):
        facs = tuple(np.asarray(f, dtype=float).ravel() for f in self.factors)
        if any(np.any(f < 0) for f in facs):
            raise ValueError("hyperparameters must be non-negative")
        object.__setattr__(self, "factors", facs)

    @property
    def dims(self):
        return [f.size for f in self.factors]

    def assemble(self) -> np.ndarray:
        return kron_vectors(self.factors)


def support_of(x: np.ndarray, rtol: float = SUPPORT_RTOL) -> np.ndarray:
    mag = np.abs(x)
    top = mag.max() if mag.size else 0.0
    if top == 0:
        return np.zeros(0, dtype=np.intp)
    return np.flatnonzero(mag > rtol * top)
