"""Exception types raised by kronsr."""


class KronSRError(Exception):
    """Base class for all library errors."""


class DimensionError(KronSRError, ValueError):
    """Operand shapes do not agree."""


class DecompositionError(KronSRError, ValueError):
    """A rank-one decomposition has no defined direction (e.g. zero input)."""


class NumericalError(KronSRError, FloatingPointError):
    """An iterate became non-finite."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class SolverError(KronSRError, RuntimeError):
    """An inner solver failed while solving one factor sub-problem."""

    def __init__(self, message, factor_index=None):
        super().__init__(message)
        self.factor_index = factor_index
