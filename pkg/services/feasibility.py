"""Initial feasible points for r_min <= ||x|| <= r_max, A x <= b.

The smallest-norm point of the polytope is a convex QP, so the outer bound
is decided exactly. Whether the polytope reaches outside the inner ball is
a norm maximization and only answered heuristically, by multi-start local
maximization inside the box ||x||_inf <= r_min.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from services.activeset import NormQP
from services.errors import InternalInconsistencyError, NormQPError
from services import qpmode
from services.options import SolverOptions

logger = logging.getLogger(__name__)


class FeasStatus(Enum):
    FEASIBLE = 'feasible'
    INFEASIBLE_OUTER = 'infeasible_outer'
    INFEASIBLE_INNER_HEURISTIC = 'infeasible_inner_heuristic'
    INFEASIBLE_CERTIFIED = 'infeasible_certified'


@dataclass
class FeasResult:
    status: FeasStatus
    x0: Optional[np.ndarray] = None
    x_min_norm: Optional[np.ndarray] = None
    x_max_norm: Optional[np.ndarray] = None
    message: str = ''

    @property
    def feasible(self):
        return self.status is FeasStatus.FEASIBLE

    def to_dict(self):
        def _list(v):
            return None if v is None else v.tolist()
        return {
            'status': self.status.value,
            'x0': _list(self.x0),
            'x_min_norm': _list(self.x_min_norm),
            'x_max_norm': _list(self.x_max_norm),
            'message': self.message,
        }


def phase_one(A, b, c=None, bounds=(None, None)):
    """A vertex of {A x <= b} (within bounds) from HiGHS, or None when empty."""
    n = A.shape[1]
    c = np.zeros(n) if c is None else c
    res = linprog(c, A_ub=A if A.shape[0] else None, b_ub=b if A.shape[0] else None,
                  bounds=bounds, method='highs')
    if res.status == 2:
        return None
    if res.status != 0:
        raise InternalInconsistencyError(f'phase-one LP failed: {res.message}')
    return np.asarray(res.x, dtype=float)


def min_norm_point(A, b, opts=None):
    """argmin ||x||^2 over A x <= b via the annulus solver with P = I.

    Returns None when the polytope is empty.
    """
    opts = opts or SolverOptions()
    n = A.shape[1]
    if A.shape[0] == 0:
        return np.zeros(n)
    x_lp = phase_one(A, b)
    if x_lp is None:
        return None
    radius = 2.0 * float(np.linalg.norm(x_lp)) + 1.0
    prob = NormQP(P=sp.identity(n, format='csr'), q=np.zeros(n), A=A, b=b, r_min=0.0, r_max=radius)
    result = qpmode.solve(prob, x_lp, opts)
    logger.debug('min-norm point: ||x|| = %.6g (%s)', np.linalg.norm(result.x), result.status.value)
    return result.x


def _max_norm_problem(A, b, r_min):
    n = A.shape[1]
    eye = np.eye(n)
    A_box = np.vstack([A, eye, -eye]) if A.shape[0] else np.vstack([eye, -eye])
    b_box = np.concatenate([b, np.full(2 * n, r_min)])
    # box corners sit at r_min * sqrt(n); keep the outer sphere clear of them
    radius = 1.01 * r_min * np.sqrt(n) + 1e-9
    prob = NormQP(P=-sp.identity(n, format='csr'), q=np.zeros(n), A=A_box, b=b_box, r_min=0.0, r_max=radius)
    return prob, A_box, b_box


def max_norm_point(A, b, r_min, x_start, opts=None):
    """Best local maximizer of ||x|| over the polytope inside ||x||_inf <= r_min.

    Starts from x_start and from LP vertices of random linear objectives;
    ties in norm go to the lowest start index.
    """
    opts = opts or SolverOptions()
    n = A.shape[1]
    prob, A_box, b_box = _max_norm_problem(A, b, r_min)
    rng = np.random.default_rng(opts.seed)
    starts = [x_start]
    for _ in range(opts.feas_starts):
        vertex = phase_one(A, b, c=rng.standard_normal(n), bounds=(-r_min, r_min))
        if vertex is not None:
            starts.append(vertex)

    def _climb(start):
        try:
            return qpmode.solve(prob, start, opts).x
        except NormQPError as e:
            logger.warning('max-norm start failed: %s', e)
            return start

    if opts.workers > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            ends = list(pool.map(_climb, starts))
    else:
        ends = [_climb(s) for s in starts]
    norms = [float(np.linalg.norm(x)) for x in ends]
    best = int(np.argmax(norms))
    logger.debug('max-norm search: %d starts, best ||x|| = %.6g', len(starts), norms[best])
    return ends[best]


def interpolate(x_min, x_max, target):
    """Point on [x_min, x_max] with norm target, nearest x_max.

    Needs ||x_min|| <= target <= ||x_max||; solves the scalar quadratic
    ||x_min + s d||^2 = target^2 for its largest root in [0, 1].
    """
    d = x_max - x_min
    a = float(d @ d)
    beta = float(x_min @ d)
    c = float(x_min @ x_min) - target * target
    if a == 0.0:
        return x_min.copy()
    root = np.sqrt(max(beta * beta - a * c, 0.0))
    s = (-beta + root) / a if beta <= 0 else -c / (beta + root)
    return x_min + min(max(s, 0.0), 1.0) * d


def initial_point(A, b, r_min, r_max, opts=None):
    """Feasible start for the annulus problem, or the reason none was found."""
    opts = opts or SolverOptions()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    tol = opts.feas_tol * max(1.0, r_max)

    x_min = min_norm_point(A, b, opts)
    if x_min is None:
        return FeasResult(status=FeasStatus.INFEASIBLE_CERTIFIED, message='polytope A x <= b is empty')
    norm_min = float(np.linalg.norm(x_min))
    if norm_min > r_max + tol:
        return FeasResult(status=FeasStatus.INFEASIBLE_OUTER, x_min_norm=x_min,
                          message=f'smallest-norm point has ||x|| = {norm_min:.6g} > r_max = {r_max:.6g}')
    if r_min == 0.0 or norm_min >= r_min:
        return FeasResult(status=FeasStatus.FEASIBLE, x0=x_min, x_min_norm=x_min)

    x_max = max_norm_point(A, b, r_min, x_min, opts)
    norm_max = float(np.linalg.norm(x_max))
    if norm_max < r_min - tol:
        return FeasResult(status=FeasStatus.INFEASIBLE_INNER_HEURISTIC, x_min_norm=x_min, x_max_norm=x_max,
                          message=f'largest norm found {norm_max:.6g} < r_min = {r_min:.6g} (not a certificate)')
    x0 = interpolate(x_min, x_max, r_min)
    return FeasResult(status=FeasStatus.FEASIBLE, x0=x0, x_min_norm=x_min, x_max_norm=x_max)
