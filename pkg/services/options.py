"""Numerical tolerances and limits shared by the solver services."""

from dataclasses import dataclass, fields, replace


@dataclass(frozen=True)
class SolverOptions:
    # eigen machinery
    arnoldi_tol: float = 1e-10
    max_restarts: int = 10
    dense_max_dim: int = 80
    force_dense: bool = False
    rank_tol: float = 1e-10
    # trs classification
    hard_case_tol: float = 1e-7
    spectrum_tol: float = 1e-6
    simple_tol: float = 1e-6
    imag_tol: float = 1e-8
    mu_tol: float = 1e-9
    # active set
    kkt_tol: float = 1e-9
    feas_tol: float = 1e-9
    step_tol: float = 1e-12
    max_iter: int = 0  # 0 -> 100 * (m + n)
    pgd_steps: int = 5
    pgd_tol: float = 1e-8
    pgd_max_iter: int = 500
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_switches: int = 50
    # feasibility
    feas_starts: int = 8
    workers: int = 1
    seed: int = 0

    def iteration_cap(self, m, n):
        return self.max_iter if self.max_iter > 0 else 100 * (m + n)

    def replace(self, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)

    @classmethod
    def from_config(cls, config):
        """Build options from a Config object or a Flask app.config mapping."""
        mapping = {
            'arnoldi_tol': 'NORMQP_ARNOLDI_TOL',
            'max_restarts': 'NORMQP_MAX_RESTARTS',
            'dense_max_dim': 'NORMQP_DENSE_MAX_DIM',
            'hard_case_tol': 'NORMQP_HARD_CASE_TOL',
            'pgd_steps': 'NORMQP_PGD_STEPS',
            'kkt_tol': 'NORMQP_KKT_TOL',
            'max_iter': 'NORMQP_MAX_ITER',
            'workers': 'NORMQP_WORKERS',
        }
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for attr, key in mapping.items():
            if isinstance(config, dict):
                raw = config.get(key)
            else:
                raw = getattr(config, key, None)
            if raw in (None, ''):
                continue
            cast = int if types[attr] in (int, 'int') else float
            values[attr] = cast(raw)
        return cls(**values)
