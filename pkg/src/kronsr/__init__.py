"""Sparse recovery with Kronecker-structured dictionaries, and its use for
IRS-aided channel estimation."""

__version__ = "0.1.0"

from .errors import DecompositionError, DimensionError, KronSRError, NumericalError, SolverError
from .kron import (FactorChain, KroneckerDictionary, canonical_chain, decompose_chain, kron_matvec,
                   kron_vectors, rank_one_approx, vec_to_matrix)
from .solvers import GammaChain, SolverConfig, SparseEstimate, dsr, krosbl, omp, sbl

__all__ = [
    "__version__",
    "KronSRError", "DimensionError", "DecompositionError", "NumericalError", "SolverError",
    "FactorChain", "KroneckerDictionary", "canonical_chain", "decompose_chain", "kron_matvec",
    "kron_vectors", "rank_one_approx", "vec_to_matrix",
    "GammaChain", "SolverConfig", "SparseEstimate", "dsr", "krosbl", "omp", "sbl",
]
