"""Solver error hierarchy.

Numerical services raise these; the facades in services.solver_api turn
them into (success, data) results for the CLI and HTTP layers.
"""


class NormQPError(Exception):
    """Base class for every solver error."""


class NotSymmetricError(NormQPError):
    pass


class RankDeficientError(NormQPError):
    pass


class NeedsDenseFallback(NormQPError):
    """Arnoldi could not deliver the requested pairs; use the dense solver."""


class InconsistentSystemError(NormQPError):

    def __init__(self, message, residual):
        super().__init__(f'{message} (residual {residual:.3e})')
        self.residual = residual


class PoleError(NormQPError):
    pass


class HardCaseSignal(NormQPError):
    """Eigenvector has a vanishing first block: the hard case applies."""


class InfeasibleError(NormQPError):

    def __init__(self, message, status='infeasible'):
        super().__init__(message)
        self.status = status


class InternalInconsistencyError(NormQPError):
    pass


class PreconditionError(NormQPError):
    pass


class ProblemParseError(NormQPError):

    def __init__(self, message, line=None):
        prefix = f'line {line}: ' if line is not None else ''
        super().__init__(prefix + message)
        self.line = line
