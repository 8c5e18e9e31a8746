"""Primal active-set solver on the sphere.

Minimizes 1/2 x^T P x + q^T x subject to ||x|| = r and A x <= b. Each outer
iteration solves the trust-region subproblem of the current working set,
moves along circular arcs toward its minimizers until one is reached or an
inequality blocks the move, falls back to projected gradient descent and a
negative-curvature escape when the arc step stalls, and finally checks the
multipliers to terminate or drop a constraint.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from services.errors import (
    InfeasibleError,
    NormQPError,
    PreconditionError,
    RankDeficientError,
)
from services.numerics import NullspaceProjector, as_dense, make_operator, projected_min_eig
from services.options import SolverOptions
from services.trs import TrsProblem, solve_trs

logger = logging.getLogger(__name__)


class KktStatus(Enum):
    OPTIMAL = 'optimal'
    LICQ_FAILURE = 'licq_failure'
    ITERATION_CAP = 'iteration_cap'
    NORM_RELEASED = 'norm_released'


@dataclass(frozen=True)
class NormQP:
    P: object
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    r_min: float
    r_max: float

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        n = q.size
        A = np.zeros((0, n)) if self.A is None else np.atleast_2d(as_dense(np.asarray(self.A) if not sp.issparse(self.A) else self.A))
        if A.size == 0:
            A = np.zeros((0, n))
        b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).ravel()
        if self.P.shape != (n, n):
            raise PreconditionError(f'P has shape {self.P.shape}, expected {(n, n)}')
        if A.shape[1] != n or A.shape[0] != b.size:
            raise PreconditionError(f'A is {A.shape}, b has {b.size} entries, n = {n}')
        if not (0 <= self.r_min <= self.r_max and self.r_max > 0):
            raise PreconditionError(f'need 0 <= r_min <= r_max, r_max > 0 (got {self.r_min}, {self.r_max})')
        P = self.P
        if isinstance(P, np.ndarray):
            P = P.astype(float)
        object.__setattr__(self, 'P', P)
        object.__setattr__(self, 'q', q)
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'b', b)
        object.__setattr__(self, 'r_min', float(self.r_min))
        object.__setattr__(self, 'r_max', float(self.r_max))
        object.__setattr__(self, '_bound_col', _bound_columns(A, b))

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return self.b.size

    @property
    def operator(self):
        return make_operator(self.P)

    def objective(self, x):
        return float(0.5 * x @ self.operator.matvec(x) + self.q @ x)

    def gradient(self, x):
        return self.operator.matvec(x) + self.q

    def violation(self, x):
        """Largest inequality violation (0 when feasible)."""
        if self.m == 0:
            return 0.0
        return float(max(0.0, np.max(self.A @ x - self.b)))

    def bound_column(self, i):
        """Column fixed to zero by row i, or -1 for a general row."""
        return int(self._bound_col[i])


def _bound_columns(A, b):
    cols = np.full(A.shape[0], -1, dtype=int)
    for i in range(A.shape[0]):
        nz = np.flatnonzero(A[i])
        if nz.size == 1 and b[i] == 0.0:
            cols[i] = nz[0]
    return cols


@dataclass(frozen=True)
class IterationEvent:
    iteration: int
    working_set_size: int
    objective: float
    step_type: str
    kkt_error: float = float('nan')
    added: Optional[int] = None
    dropped: Optional[int] = None
    multiplier: Optional[float] = None
    mode: Optional[str] = None

    def as_row(self):
        return {
            'iter': self.iteration,
            'W': self.working_set_size,
            'f': self.objective,
            'step_type': self.step_type,
            'kkt_err': self.kkt_error,
        }


@dataclass
class KktPoint:
    x: np.ndarray
    kappa: np.ndarray
    mu: float
    kkt_residual: float
    status: KktStatus
    iterations: int = 0
    objective: float = float('nan')
    working_set: tuple = ()
    components: dict = field(default_factory=dict)
    mode: Optional[str] = None

    @property
    def mu_lower(self):
        """Nonnegative multiplier of the lower norm bound (0 off that sphere)."""
        return max(0.0, -self.mu) if self.mode == 'sphere_min' else 0.0

    def to_dict(self):
        return {
            'x': self.x.tolist(),
            'kappa': self.kappa.tolist(),
            'mu': self.mu,
            'mu_lower': self.mu_lower,
            'kkt_error': self.kkt_residual,
            'status': self.status.value,
            'iterations': self.iterations,
            'objective': self.objective,
            'working_set': list(self.working_set),
            'mode': self.mode,
            'components': self.components,
        }


def kkt_components(prob, x, kappa, mu):
    """The four KKT error terms, norm constraint in squared form.

    mu multiplies x directly in the stationarity term, so the multiplier
    of ||x||^2 <= r^2 (gradient term 2 mu' x) is mu' = mu / 2. The sign of
    mu is a dual condition only when r_min = 0; with r_min > 0 it picks the
    active bound instead.
    """
    x = np.asarray(x, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    sq = float(x @ x)
    slack = prob.A @ x - prob.b if prob.m else np.zeros(0)
    primal = max(0.0, float(np.max(slack, initial=0.0)), sq - prob.r_max ** 2, prob.r_min ** 2 - sq)
    dual = -min(0.0, float(np.min(kappa, initial=0.0)))
    if prob.r_min < prob.r_max and mu < 0 and prob.r_min == 0.0:
        dual = max(dual, -mu)
    grad = prob.gradient(x) + mu * x
    if prob.m:
        grad = grad + prob.A.T @ kappa
    stationarity = float(np.max(np.abs(grad), initial=0.0))
    bound = prob.r_max if (mu >= 0 or prob.r_min == prob.r_max) else prob.r_min
    compl = min(abs(mu), abs(sq - bound ** 2))
    if prob.m:
        compl = max(compl, float(np.max(np.minimum(np.abs(kappa), np.abs(slack)), initial=0.0)))
    return {'primal': primal, 'dual': dual, 'stationarity': stationarity, 'compl': compl}


def kkt_error(prob, x, kappa, mu):
    return max(kkt_components(prob, x, kappa, mu).values())


class WorkingSet:
    """Indices of inequalities held as equalities, kept linearly independent.

    Bound rows fix one variable each, so independence only has to be checked
    for the general rows restricted to the columns that are still free.
    """

    def __init__(self, prob, indices=(), rank_tol=1e-8):
        self.prob = prob
        self.rank_tol = rank_tol
        self.indices = []
        for i in indices:
            self.add(i)

    def __len__(self):
        return len(self.indices)

    def __contains__(self, i):
        return i in self.indices

    def fixed_columns(self):
        return {self.prob.bound_column(i) for i in self.indices if self.prob.bound_column(i) >= 0}

    def general_rows(self):
        return [i for i in self.indices if self.prob.bound_column(i) < 0]

    def _independent(self, general, fixed):
        if not general:
            return True
        mask = np.ones(self.prob.n, dtype=bool)
        mask[list(fixed)] = False
        if len(general) > int(mask.sum()):
            return False
        sv = la.svdvals(self.prob.A[np.ix_(general, np.flatnonzero(mask))])
        return sv[-1] > self.rank_tol * max(sv[0], 1e-300)

    def can_add(self, i):
        if i in self.indices or not np.any(self.prob.A[i]):
            return False
        fixed, general = self.fixed_columns(), self.general_rows()
        col = self.prob.bound_column(i)
        if col >= 0:
            if col in fixed:
                return False
            fixed.add(col)
        else:
            general.append(i)
        return self._independent(general, fixed)

    def add(self, i):
        if not self.can_add(i):
            raise RankDeficientError(f'constraint {i} is dependent on the working set')
        self.indices.append(int(i))

    def remove(self, i):
        self.indices.remove(i)

    def key(self):
        return tuple(sorted(self.indices))

    def copy(self):
        other = WorkingSet(self.prob, rank_tol=self.rank_tol)
        other.indices = list(self.indices)
        return other


class SphereSlice:
    """Feasible set {||x|| = r, a_i x = b_i for i in W} in free coordinates.

    Rows of W that fix a single variable to zero are eliminated; the rest
    define an affine set c + null(A_bar) whose intersection with the sphere
    is a sphere of radius rho around c.
    """

    def __init__(self, prob, working_set, r):
        self.prob = prob
        self.r = float(r)
        fixed = working_set.fixed_columns()
        self.general = working_set.general_rows()
        self.free = np.array([j for j in range(prob.n) if j not in fixed], dtype=int)
        nf = self.free.size
        self.A_bar = prob.A[np.ix_(self.general, self.free)] if self.general else np.zeros((0, nf))
        self.b_bar = prob.b[self.general] if self.general else np.zeros(0)
        self.dim = nf - len(self.general)
        if self.general and nf > 0:
            self.center = la.lstsq(self.A_bar, self.b_bar)[0]
        else:
            self.center = np.zeros(nf)
        self.rho = float(np.sqrt(max(self.r ** 2 - self.center @ self.center, 0.0)))
        self.projector = NullspaceProjector(self.A_bar, n=nf) if self.dim > 0 else None

    def embed(self, xf):
        x = np.zeros(self.prob.n)
        x[self.free] = xf
        return x

    def offset(self, x):
        """Component of x inside null(A_bar), free coordinates."""
        return self.projector.matvec(x[self.free] - self.center)

    def retract(self, xf):
        y = self.projector.matvec(xf - self.center)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return None
        return self.embed(self.center + self.rho * y / norm)

    def snap(self, x):
        snapped = self.retract(x[self.free])
        return x if snapped is None else snapped

    def gradient(self, x):
        return self.prob.gradient(x)[self.free]

    def tangent_gradient(self, x):
        t = self.projector.matvec(self.gradient(x))
        y = self.offset(x)
        yy = y @ y
        if yy > 0:
            t = t - (y @ t) / yy * y
        return t

    def sphere_multiplier(self, x):
        y = self.offset(x)
        yy = y @ y
        return float(-(y @ self.projector.matvec(self.gradient(x))) / yy) if yy > 0 else 0.0

    def restricted_operator(self):
        P = self.prob.P
        F = self.free
        if isinstance(P, np.ndarray):
            return P[np.ix_(F, F)]
        if sp.issparse(P):
            return sp.csr_matrix(P)[F][:, F]
        op = make_operator(P)

        def matvec(v):
            return op.matvec(self.embed(np.ravel(v)))[F]

        return spla.LinearOperator((F.size, F.size), matvec=matvec, dtype=float)

    def trs_problem(self):
        return TrsProblem(P=self.restricted_operator(), q=self.prob.q[self.free], r=self.r,
                          A=self.A_bar if self.general else None,
                          b=self.b_bar if self.general else None)

    def tangent_basis(self, x):
        N = self.projector.nullspace_basis()
        u = N.T @ self.offset(x)
        if np.linalg.norm(u) == 0.0:
            return N
        return N @ la.null_space(u[None, :])

    def isolated_points(self):
        """Feasible points of a slice with at most one free direction."""
        if self.dim <= 0:
            return [self.embed(self.center)]
        z = self.projector.nullspace_basis()[:, 0]
        return [self.embed(self.center + self.rho * z), self.embed(self.center - self.rho * z)]


@dataclass
class _Arc:
    """Circle o + R (cos t e1 + sin t e2) in free coordinates, t = 0 at the start."""
    origin: np.ndarray
    radius: float
    e1: np.ndarray
    e2: np.ndarray

    def point(self, t):
        return self.origin + self.radius * (np.cos(t) * self.e1 + np.sin(t) * self.e2)


def _indices(working_set):
    return list(working_set.indices) if isinstance(working_set, WorkingSet) else list(working_set)


def _first_block(prob, slice_, arc, t_max, working_set, tol):
    """First inequality outside W violated along the arc for t in [0, t_max].

    Along the arc a_i x(t) - b_i = amp cos(t - psi) - gamma, so the entering
    crossing is t = psi - arccos(gamma / amp). Ties go to the lowest index.
    """
    if prob.m == 0:
        return None, None
    A_f = prob.A[:, slice_.free]
    alpha = arc.radius * (A_f @ arc.e1)
    beta = arc.radius * (A_f @ arc.e2)
    gamma = prob.b - A_f @ arc.origin
    amp = np.hypot(alpha, beta)
    candidate = np.ones(prob.m, dtype=bool)
    candidate[_indices(working_set)] = False
    t = np.full(prob.m, np.inf)
    at_start = candidate & (alpha - gamma >= -tol * np.maximum(1.0, np.abs(prob.b))) & (beta > 1e-10 * amp)
    t[at_start] = 0.0
    crossing = candidate & ~at_start & (amp > 1e-14 * np.maximum(1.0, np.abs(gamma))) & (gamma < amp)
    if np.any(crossing):
        ratio = np.maximum(gamma[crossing] / amp[crossing], -1.0)
        psi = np.arctan2(beta[crossing], alpha[crossing])
        t[crossing] = (psi - np.arccos(ratio)) % (2 * np.pi)
    t[t > t_max] = np.inf
    t_min = float(t.min())
    if not np.isfinite(t_min):
        return None, None
    return t_min, int(np.flatnonzero(t <= t_min + 1e-12)[0])


def _circle_frame(slice_, x_k, directions):
    """Circle through x_k in the plane x_k + span(directions) on the slice."""
    y_k = slice_.offset(x_k)
    basis = []
    for d in directions:
        if d is None:
            continue
        d = slice_.projector.matvec(d)
        for u in basis:
            d = d - (u @ d) * u
        norm = np.linalg.norm(d)
        if norm > 1e-10 * max(1.0, slice_.rho):
            basis.append(d / norm)
    if not basis:
        return None
    if len(basis) == 1:
        # great circle through x_k along the single direction
        d = y_k - (basis[0] @ y_k) * basis[0]
        if np.linalg.norm(d) <= 1e-12 * max(1.0, slice_.rho):
            return None
        basis.append(d / np.linalg.norm(d))
    U = np.column_stack(basis[:2])
    o = y_k - U @ (U.T @ y_k)
    R = float(np.sqrt(max(slice_.rho ** 2 - o @ o, 0.0)))
    if R <= 1e-12 * max(1.0, slice_.rho):
        return None
    c = U.T @ (y_k - o)
    c = c / np.linalg.norm(c)
    return _Arc(origin=slice_.center + o, radius=R, e1=U @ c, e2=U @ np.array([-c[1], c[0]]))


def _arc_restriction(prob, slice_, arc):
    """f on the arc as 1/2 u^T H u + g^T u + const with u = R (cos t, sin t)."""
    op = make_operator(slice_.restricted_operator())
    E = np.column_stack([arc.e1, arc.e2])
    H = E.T @ np.column_stack([op.matvec(arc.e1), op.matvec(arc.e2)])
    H = 0.5 * (H + H.T)
    g = E.T @ (op.matvec(arc.origin) + prob.q[slice_.free])
    return H, g


def two_dim_subproblem(prob, slice_, x_k, p1, p2=None, direction=None, working_set=(), opts=None):
    """Walk the circle through x_k, p1 and p2 (or along direction) downhill.

    The restriction of f to the circle is a two-dimensional TRS, solved
    densely; the walk heads for its nearest minimizer along a descending
    arc and stops at the first inequality it would cross.

    Returns:
        (x_next, blocking index or None, reached) where reached is True when
        the walk ended on a minimizer of the circle.
    """
    opts = opts or SolverOptions()
    tiny = opts.step_tol * max(1.0, slice_.r)
    d1 = None if p1 is None else (p1 - x_k)[slice_.free]
    if direction is not None:
        d2 = direction[slice_.free]
    else:
        d2 = None if p2 is None else (p2 - x_k)[slice_.free]
    d1 = None if d1 is None or np.linalg.norm(d1) <= tiny else d1
    d2 = None if d2 is None or np.linalg.norm(d2) <= tiny else d2
    if d1 is None and d2 is None:
        return x_k, None, True
    arc = _circle_frame(slice_, x_k, [d1, d2])
    if arc is None:
        return x_k, None, False
    H, g = _arc_restriction(prob, slice_, arc)
    R = arc.radius
    scale = max(1.0, float(np.abs(H).max()) * R ** 2, float(np.abs(g).max()) * R)
    spread = float(np.abs(H - 0.5 * np.trace(H) * np.eye(2)).max()) * R ** 2
    if spread <= 1e-13 * scale and float(np.abs(g).max()) * R <= 1e-13 * scale:
        # objective constant on the circle
        return x_k, None, True

    outcome = solve_trs(TrsProblem(P=H, q=g, r=R), opts.replace(force_dense=True))
    targets = list(outcome.global_points)
    if outcome.local_point is not None:
        targets.append(outcome.local_point)
    angles = np.array([np.arctan2(u[1], u[0]) % (2 * np.pi) for u in targets])
    slope = R * (g[1] + R * H[0, 1])
    curvature = R * (-g[0] + R * (H[1, 1] - H[0, 0]))

    if abs(slope) > 1e-12 * scale:
        signs = [-1.0 if slope > 0 else 1.0]
    elif curvature < 0:
        forward = _travel(angles, 1.0)
        backward = _travel(angles, -1.0)
        signs = [1.0, -1.0] if forward <= backward else [-1.0, 1.0]
    else:
        at_min = bool(np.any(np.minimum(angles, 2 * np.pi - angles) <= 1e-9))
        return x_k, None, at_min

    first = None
    for sign in signs:
        walk = _Arc(origin=arc.origin, radius=R, e1=arc.e1, e2=sign * arc.e2)
        t_target = _travel(angles, sign)
        if not np.isfinite(t_target):
            return x_k, None, True
        t_block, index = _first_block(prob, slice_, walk, t_target, working_set, opts.feas_tol)
        if index is None:
            return slice_.embed(walk.point(t_target)), None, True
        step = (slice_.embed(walk.point(t_block)), index, False)
        if t_block > 0.0:
            return step
        first = first or step
    return first


def _travel(angles, sign):
    """Arc length (in radians) to the nearest target when walking in sign direction."""
    walked = angles if sign > 0 else (2 * np.pi - angles) % (2 * np.pi)
    walked = walked[walked > 1e-12]
    return float(walked.min()) if walked.size else np.inf


def projected_gradient_descent(prob, slice_, x_start, working_set, opts=None, max_steps=None):
    """Projected gradient descent on the slice.

    Returns (x_end, hit index or None, converged). A step that would leave
    the feasible region is cut where the geodesic meets the constraint.
    """
    opts = opts or SolverOptions()
    max_steps = opts.pgd_max_iter if max_steps is None else max_steps
    x = x_start
    f = prob.objective(x)
    eta = 1.0
    for _ in range(max_steps):
        g = slice_.tangent_gradient(x)
        gn = float(np.linalg.norm(g))
        if gn <= opts.pgd_tol * max(1.0, float(np.linalg.norm(slice_.gradient(x)))):
            return x, None, True
        trial = None
        for _ in range(60):
            candidate = slice_.retract(x[slice_.free] - eta * g)
            if candidate is not None and prob.objective(candidate) <= f - opts.armijo * eta * gn ** 2:
                trial = candidate
                break
            eta *= opts.backtrack
        if trial is None:
            return x, None, True
        y = slice_.offset(x)
        arc = _Arc(origin=slice_.center, radius=slice_.rho, e1=y / np.linalg.norm(y), e2=-g / gn)
        t_step = float(np.arctan2(eta * gn, slice_.rho))
        t_block, index = _first_block(prob, slice_, arc, t_step, working_set, opts.feas_tol)
        if index is not None:
            hit = slice_.embed(arc.point(t_block))
            return hit, index, False
        x, f = trial, prob.objective(trial)
        eta = min(1.0, 2.0 * eta)
    return x, None, False


def pre_iteration_pgd(prob, slice_, x, working_set, k_steps, opts=None):
    if k_steps <= 0:
        return x, None
    x_new, hit, _ = projected_gradient_descent(prob, slice_, x, working_set, opts, max_steps=k_steps)
    return x_new, hit


def limiting_direction_escape(prob, slice_, x_s, x_g, working_set, opts=None):
    """Leave a saddle of the working-set subproblem along negative curvature.

    Raises:
        PreconditionError: the projected Hessian at x_s is positive semidefinite.
    """
    opts = opts or SolverOptions()
    lam, d = _projected_curvature(prob, slice_, x_s)
    if lam >= -opts.kkt_tol * max(1.0, abs(lam)):
        raise PreconditionError(f'projected Hessian is not indefinite (lambda_min = {lam:.3e})')
    x_next, blocking, _ = two_dim_subproblem(prob, slice_, x_s, x_g, direction=slice_.embed(d),
                                             working_set=working_set, opts=opts)
    if x_next is x_s:
        # x_g coincides with x_s: walk the great circle along d
        x_next, blocking, _ = two_dim_subproblem(prob, slice_, x_s, None, direction=slice_.embed(d),
                                                 working_set=working_set, opts=opts)
    return x_next, blocking


def _projected_curvature(prob, slice_, x):
    Z = slice_.tangent_basis(x)
    mu = slice_.sphere_multiplier(x)
    op = make_operator(slice_.restricted_operator())
    shifted = spla.LinearOperator(op.shape, matvec=lambda v: op.matvec(np.ravel(v)) + mu * np.ravel(v), dtype=float)
    return projected_min_eig(shifted, Z)


@dataclass
class MultiplierCheck:
    action: str
    kappa: np.ndarray
    mu: float
    drop: Optional[int] = None
    residual: float = 0.0


def check_multipliers(prob, x, working_set, opts=None, norm_sign=None):
    """Least-squares multipliers at a stationary point of the working-set problem.

    action is 'optimal', 'drop', 'licq' or 'release' (norm constraint should
    leave the working set; only with norm_sign).
    """
    opts = opts or SolverOptions()
    grad = prob.gradient(x)
    kappa = np.zeros(prob.m)
    fixed = {prob.bound_column(i): i for i in working_set.indices if prob.bound_column(i) >= 0}
    general = [i for i in working_set.indices if prob.bound_column(i) < 0]
    free = np.array([j for j in range(prob.n) if j not in fixed], dtype=int)
    B = np.column_stack([prob.A[np.ix_(general, free)].T, x[free]]) if general else x[free][:, None]
    coeffs, _, rank, sv = la.lstsq(B, -grad[free])
    if sv.size == 0 or sv[-1] <= 1e-10 * sv[0] or rank < B.shape[1]:
        return MultiplierCheck(action='licq', kappa=kappa, mu=0.0)
    kappa[general] = coeffs[:-1]
    mu = float(coeffs[-1])
    for j, i in fixed.items():
        col = grad[j] + mu * x[j] + (prob.A[general, j] @ kappa[general] if general else 0.0)
        kappa[i] = -col / prob.A[i, j]
    residual = float(np.linalg.norm(grad + mu * x + prob.A.T @ kappa)) if prob.m else \
        float(np.linalg.norm(grad + mu * x))

    tol = opts.kkt_tol * max(1.0, float(np.abs(grad).max(initial=0.0)))
    active = list(working_set.indices)
    min_kappa = min((kappa[i] for i in active), default=np.inf)
    if norm_sign is not None:
        mu_eff = norm_sign * mu
        if mu_eff < -tol and mu_eff < min_kappa - tol:
            return MultiplierCheck(action='release', kappa=kappa, mu=mu, residual=residual)
    if min_kappa >= -tol:
        return MultiplierCheck(action='optimal', kappa=kappa, mu=mu, residual=residual)
    drop = min(active, key=lambda i: (kappa[i], i))
    return MultiplierCheck(action='drop', kappa=kappa, mu=mu, drop=drop, residual=residual)


class FixedNormSolver:
    """State of one active-set run on ||x|| = radius."""

    def __init__(self, prob, opts=None, callback=None, radius=None, norm_sign=None, iteration_offset=0):
        self.prob = prob
        self.opts = opts or SolverOptions()
        self.callback = callback
        self.radius = prob.r_max if radius is None else float(radius)
        self.norm_sign = norm_sign
        self.iteration = iteration_offset
        self.cap = self.opts.iteration_cap(prob.m, prob.n) + iteration_offset
        self.seen = set()
        self.last_drop = None

    def _emit(self, x, working_set, step, **extra):
        if self.callback is None:
            return
        self.callback(IterationEvent(iteration=self.iteration, working_set_size=len(working_set),
                                     objective=self.prob.objective(x), step_type=step, **extra))

    def _add(self, working_set, index, x, step):
        if working_set.can_add(index):
            working_set.add(index)
            logger.debug('iter %d: constraint %d enters W (%s)', self.iteration, index, step)
        else:
            logger.debug('iter %d: constraint %d dependent, not added', self.iteration, index)
        self._emit(x, working_set, step, added=index)

    def _active(self, index, x):
        row = self.prob.A[index]
        b = float(self.prob.b[index])
        return abs(float(row @ x) - b) <= 1e-8 * max(1.0, abs(b), self.radius * float(np.linalg.norm(row)))

    def _feasible(self, x):
        return self.prob.violation(x) <= self.opts.feas_tol * max(1.0, float(np.abs(self.prob.b).max(initial=0.0)))

    def _close(self, a, b, rel):
        return float(np.linalg.norm(a - b)) <= rel * max(1.0, self.radius)

    def _result(self, x, working_set, check, status):
        kappa = check.kappa if check is not None else np.zeros(self.prob.m)
        mu = check.mu if check is not None else 0.0
        components = kkt_components(self.prob, x, kappa, mu) if status != KktStatus.NORM_RELEASED else {}
        error = max(components.values()) if components else float('nan')
        return KktPoint(x=x, kappa=kappa, mu=mu, kkt_residual=error, status=status,
                        iterations=self.iteration, objective=self.prob.objective(x),
                        working_set=working_set.key(), components=components)

    def run(self, x0, working_set):
        prob, opts = self.prob, self.opts
        x = x0
        best = (prob.objective(x), x, working_set.copy())
        while self.iteration < self.cap:
            self.iteration += 1
            slice_ = SphereSlice(prob, working_set, self.radius)
            if slice_.dim >= 1:
                x = slice_.snap(x)
            x_prev = x
            x_next, hit, step = self._move(slice_, x, working_set)
            if prob.objective(x_next) <= prob.objective(x) + 1e-12 * max(1.0, abs(prob.objective(x))):
                x = x_next
            elif hit is not None and slice_.dim >= 1:
                # rejected move: retry by gradient descent from the current point
                x_pgd, hit_pgd, _ = projected_gradient_descent(prob, slice_, x_prev, working_set, opts)
                if prob.objective(x_pgd) < prob.objective(x_prev):
                    x, hit, step = x_pgd, hit_pgd, 'pgd'
                else:
                    hit = None
            if hit is not None and not self._active(hit, x):
                logger.debug('iter %d: constraint %d not active at the iterate, not added', self.iteration, hit)
                hit = None
            if hit is not None:
                if hit == self.last_drop and self._close(x_prev, x_next, opts.step_tol):
                    # blocked at once by the constraint just released: descend by gradient instead
                    x_pgd, hit_pgd, _ = projected_gradient_descent(prob, slice_, x_prev, working_set, opts)
                    if hit_pgd is not None and hit_pgd != hit:
                        x = x_pgd
                        self._add(working_set, hit_pgd, x, 'pgd')
                        self.last_drop = None
                        continue
                    if hit_pgd is None:
                        x = x_pgd if prob.objective(x_pgd) < prob.objective(x_prev) else x_prev
                        hit = None
                if hit is not None:
                    self._add(working_set, hit, x, step)
                    self.last_drop = None
                    continue

            check = check_multipliers(prob, x, working_set, opts, self.norm_sign)
            f = prob.objective(x)
            if f < best[0]:
                best = (f, x, working_set.copy())
            if check.action == 'licq':
                logger.warning('LICQ fails at iteration %d; returning best iterate', self.iteration)
                return self._result(best[1], best[2], check_multipliers(prob, best[1], best[2], opts),
                                    KktStatus.LICQ_FAILURE)
            if check.action == 'optimal':
                result = self._result(x, working_set, check, KktStatus.OPTIMAL)
                self._emit(x, working_set, 'stop', kkt_error=result.kkt_residual)
                return result
            if check.action == 'release':
                self._emit(x, working_set, 'release', multiplier=check.mu)
                return self._result(x, working_set, check, KktStatus.NORM_RELEASED)
            signature = (working_set.key(), round(f, 10))
            if signature in self.seen:
                logger.warning('working set revisited at iteration %d; stopping', self.iteration)
                return self._result(x, working_set, check, KktStatus.ITERATION_CAP)
            self.seen.add(signature)
            working_set.remove(check.drop)
            self.last_drop = check.drop
            self._emit(x, working_set, 'drop', dropped=check.drop, multiplier=float(check.kappa[check.drop]),
                       kkt_error=kkt_error(prob, x, check.kappa, check.mu))
            logger.debug('iter %d: drop %d (kappa=%.3e)', self.iteration, check.drop, check.kappa[check.drop])
        logger.warning('iteration cap %d reached', self.cap)
        check = check_multipliers(prob, x, working_set, opts)
        return self._result(x, working_set, check, KktStatus.ITERATION_CAP)

    def _move(self, slice_, x, working_set):
        """One iteration's primal step. Returns (x_next, hit, step_type)."""
        prob, opts = self.prob, self.opts
        if slice_.dim <= 1:
            return self._enumerate(slice_, x, working_set)

        x_warm, hit = pre_iteration_pgd(prob, slice_, x, working_set, opts.pgd_steps, opts)
        if hit is not None:
            return x_warm, hit, 'pgd'
        x = x_warm

        outcome = solve_trs(slice_.trs_problem(), opts)
        minimizers = [slice_.embed(p) for p in outcome.global_points]
        if outcome.local_point is not None:
            minimizers.append(slice_.embed(outcome.local_point))
        x_g = minimizers[0]
        for p in minimizers[:len(outcome.global_points)]:
            if self._feasible(p):
                self._emit(p, working_set, 'trs')
                return p, None, 'trs'
        if len(minimizers) > 1 and not self._close(minimizers[0], minimizers[1], 1e-10):
            x_next, hit, reached = two_dim_subproblem(prob, slice_, x, minimizers[0], minimizers[1],
                                                      working_set=working_set, opts=opts)
        else:
            x_next, hit, reached = two_dim_subproblem(
                prob, slice_, x, x_g, direction=-slice_.embed(slice_.tangent_gradient(x)),
                working_set=working_set, opts=opts)
            reached = reached and any(self._close(x_next, p, 1e-8) for p in minimizers)
        if hit is not None:
            return x_next, hit, 'arc'
        if reached:
            self._emit(x_next, working_set, 'arc')
            return x_next, None, 'arc'

        start = x_next if prob.objective(x_next) <= prob.objective(x) else x
        x_s, hit, converged = projected_gradient_descent(prob, slice_, start, working_set, opts)
        if hit is not None:
            return x_s, hit, 'pgd'
        for p in minimizers:
            if self._close(x_s, p, 1e-4) and self._feasible(p) and prob.objective(p) <= prob.objective(x_s):
                x_s = p
                break
        lam, _ = _projected_curvature(prob, slice_, x_s)
        if lam < -opts.kkt_tol * max(1.0, abs(lam)) and not self._feasible(x_g):
            try:
                x_e, blocking = limiting_direction_escape(prob, slice_, x_s, x_g, working_set, opts)
            except NormQPError as e:
                logger.debug('escape skipped: %s', e)
            else:
                if blocking is not None:
                    return x_e, blocking, 'escape'
                if prob.objective(x_e) < prob.objective(x_s):
                    x_s = x_e
        self._emit(x_s, working_set, 'pgd')
        return x_s, None, 'pgd'

    def _enumerate(self, slice_, x, working_set):
        """Slices with at most one free direction hold at most two points."""
        prob = self.prob
        if slice_.dim == 1 and slice_.rho > 0:
            for p in slice_.isolated_points():
                if not self._close(p, x, 1e-10) and self._feasible(p) and prob.objective(p) < prob.objective(x):
                    self._emit(p, working_set, 'enum')
                    return p, None, 'enum'
        return x, None, 'enum'


def solve_fixed_norm(prob, x0, working_set=(), opts=None, callback=None, radius=None, norm_sign=None):
    """Active-set minimization of the QP on the sphere ||x|| = radius.

    Args:
        prob: NormQP instance; radius defaults to prob.r_max.
        x0: feasible start on the sphere.
        working_set: indices active at x0 to start from, or a WorkingSet.
        callback: receives an IterationEvent per step.
        norm_sign: +1 or -1 when the sphere is one side of an annulus; the
            run then stops with NORM_RELEASED when the norm multiplier has
            the wrong sign and is the most negative one.

    Raises:
        InfeasibleError: x0 is not feasible.
    """
    opts = opts or SolverOptions()
    radius = prob.r_max if radius is None else float(radius)
    x0 = np.asarray(x0, dtype=float)
    norm0 = float(np.linalg.norm(x0))
    if abs(norm0 - radius) > 1e-6 * max(1.0, radius) or prob.violation(x0) > 1e-6 * max(1.0, float(np.abs(prob.b).max(initial=0.0))):
        raise InfeasibleError(f'start point is not feasible (norm {norm0:.6g}, violation {prob.violation(x0):.3e})')
    if not isinstance(working_set, WorkingSet):
        ws = WorkingSet(prob, rank_tol=1e-8)
        for i in working_set:
            if abs(prob.A[i] @ x0 - prob.b[i]) > 1e-6 * max(1.0, abs(prob.b[i])):
                raise PreconditionError(f'constraint {i} is not active at the start point')
            if ws.can_add(i):
                ws.add(i)
        working_set = ws
    solver = FixedNormSolver(prob, opts, callback, radius=radius, norm_sign=norm_sign)
    return solver.run(x0, working_set)
