"""Sparse recovery solvers: OMP, SBL, KroSBL baselines and decomposition-based recovery."""

from .config import NOISE_FLOOR, SUPPORT_RTOL, GammaChain, SolverConfig, SparseEstimate, support_of
from .dsr import INNER_SOLVERS, dsr, per_factor_noise_variance
from .krosbl import gamma_project_am, gamma_project_svd, krosbl
from .omp import omp
from .sbl import sbl

__all__ = [
    "NOISE_FLOOR",
    "SUPPORT_RTOL",
    "GammaChain",
    "SolverConfig",
    "SparseEstimate",
    "support_of",
    "INNER_SOLVERS",
    "dsr",
    "per_factor_noise_variance",
    "gamma_project_am",
    "gamma_project_svd",
    "krosbl",
    "omp",
    "sbl",
]
