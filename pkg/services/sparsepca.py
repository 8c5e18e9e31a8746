"""l1-constrained sparse PCA through the nonnegative split.

    max x^T S x  s.t. ||x||_2 <= 1, ||x||_1 <= gamma

is solved as the annulus QP in w = (w1, w2) >= 0 with x = w1 - w2,
1^T w <= gamma and ||w|| <= 1. The covariance S of the (implicitly
centered, possibly deflated) data matrix is only ever applied to vectors.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from services.activeset import NormQP
from services.errors import PreconditionError
from services import qpmode
from services.options import SolverOptions

logger = logging.getLogger(__name__)

SUPPORT_TOL = 1e-6
COMPLEMENTARITY_TOL = 1e-8
DENSE_SVD_MAX_DIM = 200


class DataMatrix:
    """k x n data matrix (rows are samples) with implicit centering and deflation.

    Products apply D_c v = D v - 1 (mbar^T v) and then subtract each stored
    rank-one term u_i (x_i^T v); nothing is ever densified.
    """

    def __init__(self, D, centered=True, deflations=()):
        self.D = sp.csr_matrix(D, dtype=float)
        self.centered = centered
        k, n = self.D.shape
        if k < 2:
            raise PreconditionError(f'need at least two samples, got {k}')
        self.mean = np.asarray(self.D.mean(axis=0)).ravel() if centered else np.zeros(n)
        self.deflations = tuple(deflations)

    @property
    def shape(self):
        return self.D.shape

    @property
    def k(self):
        return self.D.shape[0]

    @property
    def n(self):
        return self.D.shape[1]

    def _base_matvec(self, v):
        return self.D @ v - (self.mean @ v)

    def _base_rmatvec(self, u):
        return self.D.T @ u - self.mean * u.sum()

    def matvec(self, v):
        v = np.ravel(v)
        out = self._base_matvec(v)
        for u_i, x_i in self.deflations:
            out = out - u_i * (x_i @ v)
        return out

    def rmatvec(self, u):
        u = np.ravel(u)
        out = self._base_rmatvec(u)
        for u_i, x_i in self.deflations:
            out = out - x_i * (u_i @ u)
        return out

    def as_operator(self):
        return spla.LinearOperator(self.shape, matvec=self.matvec, rmatvec=self.rmatvec, dtype=float)

    def covariance_operator(self):
        """S v = D_c^T D_c v / (k - 1)."""
        scale = 1.0 / (self.k - 1)
        return spla.LinearOperator((self.n, self.n), matvec=lambda v: scale * self.rmatvec(self.matvec(v)),
                                   rmatvec=lambda v: scale * self.rmatvec(self.matvec(v)), dtype=float)

    def columns(self, support):
        """Dense k x |support| block of the centered, deflated matrix."""
        support = np.asarray(support, dtype=int)
        block = self.D[:, support].toarray() - self.mean[support]
        for u_i, x_i in self.deflations:
            block -= np.outer(u_i, x_i[support])
        return block

    def column_variances(self):
        """diag(S) without forming S."""
        sq = np.asarray(self.D.multiply(self.D).sum(axis=0)).ravel()
        if self.centered:
            sq = sq - self.k * self.mean ** 2
        if self.deflations:
            U = np.column_stack([u for u, _ in self.deflations])
            X = np.column_stack([x for _, x in self.deflations])
            G = np.column_stack([self._base_rmatvec(u) for u in U.T])
            sq = sq - 2.0 * np.einsum('jp,jp->j', G, X) + np.einsum('jp,pq,jq->j', X, U.T @ U, X)
        return sq / (self.k - 1)

    def dense(self):
        return self.columns(np.arange(self.n))

    def deflated(self, x):
        x = np.asarray(x, dtype=float)
        return DataMatrix(self.D, self.centered, self.deflations + ((self.matvec(x), x),))


@dataclass
class SpcaSolution:
    x: np.ndarray
    w: np.ndarray
    support: np.ndarray
    variance: float
    gamma: float
    exact: bool = True
    status: str = 'optimal'
    history: list = field(default_factory=list)

    @property
    def cardinality(self):
        return int(self.support.size)

    def to_dict(self):
        return {
            'support': self.support.tolist(),
            'cardinality': self.cardinality,
            'variance': self.variance,
            'gamma': self.gamma,
            'exact': self.exact,
            'status': self.status,
            'x': self.x.tolist(),
        }


@dataclass(frozen=True)
class SparsePcaProblem:
    data: DataMatrix
    gamma: float
    nonneg: bool = False

    def to_norm_qp(self):
        return reformulate(self.data.covariance_operator(), self.gamma, nonneg=self.nonneg)


def support_of(x, tol=SUPPORT_TOL):
    peak = float(np.abs(x).max(initial=0.0))
    if peak == 0.0:
        return np.zeros(0, dtype=int)
    return np.flatnonzero(np.abs(x) > tol * peak)


def reformulate(sigma, gamma, nonneg=False):
    """NormQP in w with objective -(w1 - w2)^T S (w1 - w2).

    Row 0 is 1^T w <= gamma; rows 1.. are the bound rows -w_j <= 0. With
    nonneg the w2 block is dropped and x = w.
    """
    if gamma < 1.0:
        raise PreconditionError(f'gamma = {gamma} < 1 leaves no unit vector feasible')
    sigma = spla.aslinearoperator(sigma)
    n = sigma.shape[0]
    if nonneg:
        P = spla.LinearOperator((n, n), matvec=lambda w: -2.0 * sigma.matvec(np.ravel(w)), dtype=float)
        size = n
    else:
        def matvec(w):
            w = np.ravel(w)
            s = sigma.matvec(w[:n] - w[n:])
            return -2.0 * np.concatenate([s, -s])

        P = spla.LinearOperator((2 * n, 2 * n), matvec=matvec, dtype=float)
        size = 2 * n
    A = np.vstack([np.ones((1, size)), -np.eye(size)])
    b = np.concatenate([[float(gamma)], np.zeros(size)])
    return NormQP(P=P, q=np.zeros(size), A=A, b=b, r_min=0.0, r_max=1.0)


def split(x, gamma, nonneg=False):
    """Feasible w for x: positive and negative parts, scaled into 1^T w <= gamma."""
    x = np.asarray(x, dtype=float)
    if nonneg:
        w = np.maximum(x, 0.0)
    else:
        w = np.concatenate([np.maximum(x, 0.0), np.maximum(-x, 0.0)])
    norm = float(np.linalg.norm(w))
    if norm > 1.0:
        w = w / norm
    l1 = float(w.sum())
    if l1 > gamma:
        w = w * (gamma / l1)
    return w


def merge(w, n, nonneg=False):
    return w.copy() if nonneg else w[:n] - w[n:]


def explained_variance(data, x):
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        return 0.0
    y = data.matvec(x)
    return float(y @ y) / (data.k - 1)


def _single_coordinate(data, gamma, nonneg):
    j = int(np.argmax(data.column_variances()))
    x = np.zeros(data.n)
    x[j] = 1.0
    return SpcaSolution(x=x, w=split(x, gamma, nonneg), support=np.array([j]),
                        variance=explained_variance(data, x), gamma=float(gamma))


def solve_component(data, gamma, init, opts=None, nonneg=False):
    """One sparse principal vector at budget gamma, started from init.

    gamma == 1 only admits coordinate vectors on the unit sphere, so that
    case is answered by the largest column variance.
    """
    opts = opts or SolverOptions()
    n = data.n
    if gamma < 1.0:
        raise PreconditionError(f'gamma = {gamma} < 1 leaves no unit vector feasible')
    if gamma <= 1.0 + 1e-12:
        return _single_coordinate(data, gamma, nonneg)
    prob = reformulate(data.covariance_operator(), gamma, nonneg=nonneg)
    w0 = split(init, gamma, nonneg)
    if not np.any(w0):
        raise PreconditionError('initial vector has no entries of the required sign')
    working_set = [1 + j for j in np.flatnonzero(w0 == 0.0)]
    result = qpmode.solve(prob, w0, opts, working_set=working_set)
    w = np.maximum(result.x, 0.0)
    if not nonneg:
        overlap = float(w[:n] @ w[n:])
        if overlap > COMPLEMENTARITY_TOL:
            logger.warning('complementarity w1^T w2 = %.3e; repairing from x = w1 - w2', overlap)
            w = split(w[:n] - w[n:], gamma)
    x = merge(w, n, nonneg)
    norm = float(np.linalg.norm(x))
    x_unit = x / norm if norm > 0 else x
    return SpcaSolution(x=x_unit, w=w, support=support_of(x_unit), variance=explained_variance(data, x_unit),
                        gamma=float(gamma), status=result.status.value)


def truncated_init(data, cardinality, nonneg=False):
    """Leading right singular vector cut to its most positive or most negative entries.

    The branch with the larger explained variance wins; both branches are
    returned with nonnegative entries so either splits into w1 alone.
    """
    if not 1 <= cardinality <= data.n:
        raise PreconditionError(f'cardinality {cardinality} outside 1..{data.n}')
    if min(data.shape) <= DENSE_SVD_MAX_DIM:
        v = la.svd(data.dense(), full_matrices=False)[2][0]
    else:
        v = spla.svds(data.as_operator(), k=1, random_state=0)[2][0]
    best, best_var = None, -np.inf
    for branch in (v, -v):
        top = np.argsort(-branch, kind='stable')[:cardinality]
        x = np.zeros(data.n)
        x[top] = np.maximum(branch[top], 0.0)
        if not np.any(x):
            continue
        x /= np.linalg.norm(x)
        var = explained_variance(data, x)
        if var > best_var:
            best, best_var = x, var
    if best is None:
        best = np.zeros(data.n)
        best[int(np.argmax(data.column_variances()))] = 1.0
    return best


def gamma_search(data, target, bounds=None, opts=None, nonneg=False, max_steps=40, init=None):
    """Bisect gamma until the principal vector has target nonzeros.

    Each solve is warm-started from the previous vector. When the target is
    never hit the closest cardinality found is returned with exact=False.
    """
    opts = opts or SolverOptions()
    if not 1 <= target <= data.n:
        raise PreconditionError(f'target cardinality {target} outside 1..{data.n}')
    lo, hi = bounds if bounds is not None else (1.0, float(np.sqrt(data.n)))
    lo = max(lo, 1.0)
    history = []
    best = None

    def consider(sol):
        nonlocal best
        history.append((sol.gamma, float(np.abs(sol.x).sum()), sol.cardinality))
        if best is None or (abs(sol.cardinality - target), -sol.variance) < \
                (abs(best.cardinality - target), -best.variance):
            best = sol

    if target == 1:
        consider(_single_coordinate(data, 1.0, nonneg))
    else:
        start = truncated_init(data, target, nonneg) if init is None else init
        top = solve_component(data, hi, start, opts, nonneg)
        consider(top)
        warm = top.x
        if top.cardinality > target:
            for _ in range(max_steps):
                gamma = 0.5 * (lo + hi)
                sol = solve_component(data, gamma, warm, opts, nonneg)
                consider(sol)
                logger.debug('gamma %.6g -> cardinality %d', gamma, sol.cardinality)
                if sol.cardinality == target:
                    break
                if sol.cardinality > target:
                    hi = gamma
                else:
                    lo = gamma
                warm = sol.x
    result = replace(best, exact=best.cardinality == target, history=history)
    if not result.exact:
        logger.warning('cardinality %d not attained; closest is %d at gamma %.6g',
                       target, result.cardinality, result.gamma)
    return result


def polish(data, support, nonneg=False):
    """Leading right singular vector of the support columns, embedded in R^n.

    Sign is fixed so the largest-magnitude entry is positive. Returns None
    in nonneg mode when the polished vector has mixed signs.
    """
    support = np.asarray(support, dtype=int)
    if support.size == 0:
        raise PreconditionError('cannot polish an empty support')
    block = data.columns(support)
    v = la.svd(block, full_matrices=False)[2][0]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    if nonneg and np.any(v < -SUPPORT_TOL * np.abs(v).max()):
        return None
    x = np.zeros(data.n)
    x[support] = np.maximum(v, 0.0) if nonneg else v
    return x / np.linalg.norm(x)


def deflate(data, x):
    """data with the component along unit-norm x removed: D - (D x) x^T."""
    x = np.asarray(x, dtype=float)
    if abs(float(np.linalg.norm(x)) - 1.0) > 1e-8:
        raise PreconditionError(f'deflation vector must be unit norm, got {np.linalg.norm(x):.6g}')
    return data.deflated(x)


def principal_components(data, k, cardinality, opts=None, nonneg=False):
    """k sparse components, each searched, polished and deflated in turn."""
    opts = opts or SolverOptions()
    components = []
    for index in range(k):
        sol = gamma_search(data, cardinality, opts=opts, nonneg=nonneg)
        polished = polish(data, sol.support, nonneg=nonneg)
        if polished is not None:
            var = explained_variance(data, polished)
            if var >= sol.variance:
                sol = replace(sol, x=polished, variance=var, w=split(polished, np.inf, nonneg))
        logger.info('component %d: cardinality %d, variance %.6g', index + 1, sol.cardinality, sol.variance)
        components.append(sol)
        data = deflate(data, sol.x)
    return components
