"""Annulus driver: r_min <= ||x|| <= r_max with linear inequalities.

The norm constraint is either held as an equality on one of the two
spheres, where the sphere active-set solver of services.activeset runs, or
it is inactive, where a generic primal active-set step for nonconvex QPs
runs. Mode switches happen when an interior step reaches a sphere or when
the sphere solver reports a norm multiplier of the wrong sign that is also
the most negative multiplier.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from services.activeset import (
    FixedNormSolver,
    IterationEvent,
    KktPoint,
    KktStatus,
    SphereSlice,
    WorkingSet,
    kkt_components,
    solve_fixed_norm,
)
from services.errors import InfeasibleError, InternalInconsistencyError
from services.numerics import DENSE_SOLVE_MAX_DIM, make_operator, sym_eig_dense
from services.options import SolverOptions

logger = logging.getLogger(__name__)

NORM_SNAP_TOL = 1e-10


class Mode(Enum):
    SPHERE_MIN = 'sphere_min'
    SPHERE_MAX = 'sphere_max'
    INTERIOR = 'interior'


class QpEvent(Enum):
    STATIONARY = 'stationary'
    HIT_INEQUALITY = 'hit_inequality'
    HIT_SPHERE_MIN = 'hit_sphere_min'
    HIT_SPHERE_MAX = 'hit_sphere_max'
    MOVED = 'moved'


@dataclass
class ModeState:
    mode: Mode
    x: np.ndarray
    working_set: WorkingSet
    switch_count: int = 0
    iteration: int = 0
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class QpStep:
    x: np.ndarray
    event: QpEvent
    index: Optional[int] = None
    step_type: str = 'newton'


def mode_for(prob, x, tol=1e-9):
    norm = float(np.linalg.norm(x))
    if abs(norm - prob.r_max) <= tol * max(1.0, prob.r_max):
        return Mode.SPHERE_MAX
    if prob.r_min > 0 and abs(norm - prob.r_min) <= tol * max(1.0, prob.r_min):
        return Mode.SPHERE_MIN
    return Mode.INTERIOR


def _reduced_model(slice_, g_free, opts):
    """Smallest eigenpair of the reduced Hessian and the minimum-length Newton step.

    Everything lives in the free coordinates of the slice; the step is None
    when the reduced gradient has a component in the Hessian's kernel.
    """
    N = slice_.projector.nullspace_basis()
    op = make_operator(slice_.restricted_operator())
    g_r = N.T @ g_free
    if N.shape[1] <= DENSE_SOLVE_MAX_DIM:
        H = N.T @ np.asarray(op.matmat(N))
        eig = sym_eig_dense(0.5 * (H + H.T), tol=np.inf)
        lam, V = eig.values, eig.vectors
        cutoff = opts.kkt_tol * max(1.0, float(np.abs(lam).max()))
        coeffs = V.T @ g_r
        keep = np.abs(lam) > cutoff
        if np.any(np.abs(coeffs[~keep]) > cutoff * max(1.0, float(np.linalg.norm(g_r)))):
            step = None
        else:
            step = -N @ (V[:, keep] @ (coeffs[keep] / lam[keep]))
        return float(lam[0]), N @ V[:, 0], step, cutoff
    reduced = spla.LinearOperator((N.shape[1],) * 2, dtype=float,
                                  matvec=lambda v: N.T @ op.matvec(N @ np.ravel(v)))
    lam = spla.eigsh(reduced, k=1, which='SA', tol=1e-8)
    lam_min, v = float(lam[0][0]), lam[1][:, 0]
    cutoff = opts.kkt_tol * max(1.0, abs(lam_min))
    step = None
    if lam_min > cutoff:
        y, _ = spla.minres(reduced, -g_r, rtol=1e-12, maxiter=10 * N.shape[1])
        step = N @ y
    return lam_min, N @ v, step, cutoff


def _sphere_root(x, d, r, outward):
    """Smallest t > 0 with ||x + t d|| = r along d, or inf."""
    a = float(d @ d)
    bh = float(x @ d)
    c = float(x @ x) - r * r
    if a == 0.0:
        return np.inf
    disc = bh * bh - a * c
    if disc < 0.0:
        return np.inf
    root = np.sqrt(disc)
    if outward:
        # x inside the ball: the crossing is the larger root
        t = (-bh + root) / a if bh <= 0 else -c / (bh + root)
        return max(t, 0.0)
    if bh >= 0:
        return np.inf
    # x outside the inner ball, heading in: smaller root
    t = c / (-bh + root)
    return max(t, 0.0) if t >= 0 else np.inf


def _ratio_test(prob, x, d, working_set, t_max, opts):
    """Longest feasible step along d up to t_max: (t, event, index)."""
    t_best, event, index = t_max, None, None
    if prob.m:
        Ad = prob.A @ d
        slack = prob.b - prob.A @ x
        tol = opts.feas_tol * max(1.0, float(np.abs(d).max()))
        for i in np.flatnonzero(Ad > tol):
            if i in working_set:
                continue
            t = max(float(slack[i] / Ad[i]), 0.0)
            if t < t_best:
                t_best, event, index = t, QpEvent.HIT_INEQUALITY, int(i)
    t = _sphere_root(x, d, prob.r_max, outward=True)
    if t < t_best:
        t_best, event, index = t, QpEvent.HIT_SPHERE_MAX, None
    if prob.r_min > 0:
        t = _sphere_root(x, d, prob.r_min, outward=False)
        if t < t_best:
            t_best, event, index = t, QpEvent.HIT_SPHERE_MIN, None
    return t_best, event, index


def qp_active_set_step(prob, x, working_set, opts=None):
    """One primal active-set step with the norm constraint left out.

    Takes the Newton step of the equality-constrained QP on W when the
    reduced Hessian is positive definite; otherwise moves along a
    negative-curvature (or kernel descent) direction. The ratio test covers
    the inequalities outside W and both spheres.

    Raises:
        InternalInconsistencyError: an unbounded direction met no constraint
            and no sphere.
    """
    opts = opts or SolverOptions()
    slice_ = SphereSlice(prob, working_set, prob.r_max)
    if slice_.dim <= 0:
        return QpStep(x=x, event=QpEvent.STATIONARY, step_type='vertex')
    g = prob.gradient(x)
    g_free = g[slice_.free]
    lam, v, newton, cutoff = _reduced_model(slice_, g_free, opts)
    gn = float(np.linalg.norm(slice_.projector.matvec(g_free)))
    scale = max(1.0, float(np.abs(g).max()))

    if lam > cutoff and newton is not None:
        d, t_max, kind = slice_.embed(newton), 1.0, 'newton'
        if float(np.linalg.norm(d)) <= opts.step_tol * max(1.0, prob.r_max):
            return QpStep(x=x, event=QpEvent.STATIONARY)
    elif lam < -cutoff:
        d = slice_.embed(v)
        if d @ g > 0:
            d = -d
        t_max, kind = np.inf, 'curvature'
    elif newton is None:
        d = -slice_.embed(slice_.projector.matvec(g_free))
        curv = float(d @ prob.operator.matvec(d))
        t_max = -float(g @ d) / curv if curv > cutoff * float(d @ d) else np.inf
        kind = 'kernel'
    else:
        # singular PSD reduced Hessian with a consistent gradient
        d, t_max, kind = slice_.embed(newton), 1.0, 'newton'
        if float(np.linalg.norm(d)) <= opts.step_tol * max(1.0, prob.r_max):
            return QpStep(x=x, event=QpEvent.STATIONARY)

    t, event, index = _ratio_test(prob, x, d, working_set, t_max, opts)
    if kind == 'curvature' and abs(float(d @ g)) <= opts.kkt_tol * scale * float(np.linalg.norm(d)):
        # g orthogonal to d: both signs descend, keep the one that travels further
        flipped = _ratio_test(prob, x, -d, working_set, t_max, opts)
        if flipped[0] > t:
            d = -d
            t, event, index = flipped
    if t <= opts.step_tol and event in (QpEvent.HIT_SPHERE_MAX, QpEvent.HIT_SPHERE_MIN) and gn > opts.kkt_tol * scale:
        # pinned on the sphere just left: steepest descent in null(A_W) instead
        d = -slice_.embed(slice_.projector.matvec(g_free))
        curv = float(d @ prob.operator.matvec(d))
        t_line = -float(g @ d) / curv if curv > 0 else np.inf
        t, event, index = _ratio_test(prob, x, d, working_set, t_line, opts)
        kind = 'steepest'
        if event is None and not np.isfinite(t):
            raise InternalInconsistencyError('descent direction is unbounded')
        if event is None:
            return QpStep(x=x + t * d, event=QpEvent.MOVED, step_type=kind)

    if not np.isfinite(t):
        raise InternalInconsistencyError('descent direction met no constraint and no sphere')
    x_new = x + t * d
    if event is None:
        return QpStep(x=x_new, event=QpEvent.STATIONARY if kind == 'newton' else QpEvent.MOVED, step_type=kind)
    if event is QpEvent.HIT_SPHERE_MAX:
        x_new = x_new * (prob.r_max / np.linalg.norm(x_new))
    elif event is QpEvent.HIT_SPHERE_MIN:
        x_new = x_new * (prob.r_min / np.linalg.norm(x_new))
    return QpStep(x=x_new, event=event, index=index, step_type=kind)


def interior_multipliers(prob, x, working_set):
    """Least-squares kappa on W with the norm constraint inactive."""
    kappa = np.zeros(prob.m)
    if len(working_set) == 0:
        return kappa, float(np.linalg.norm(prob.gradient(x)))
    idx = list(working_set.indices)
    g = prob.gradient(x)
    coeffs = la.lstsq(prob.A[idx].T, -g)[0]
    kappa[idx] = coeffs
    return kappa, float(np.linalg.norm(g + prob.A[idx].T @ coeffs))


class AnnulusSolver:
    """Mode-switching active-set run for r_min <= ||x|| <= r_max."""

    def __init__(self, prob, opts=None, callback=None):
        self.prob = prob
        self.opts = opts or SolverOptions()
        self.callback = callback
        self.cap = self.opts.iteration_cap(prob.m, prob.n)
        self.seen = set()

    def _emit(self, state, step, **extra):
        if self.callback is not None:
            self.callback(IterationEvent(iteration=state.iteration, working_set_size=len(state.working_set),
                                         objective=self.prob.objective(state.x), step_type=step,
                                         mode=state.mode.value, **extra))

    def _switch(self, state, mode, multiplier=None):
        logger.debug('iter %d: %s -> %s', state.iteration, state.mode.value, mode.value)
        state.history.append((state.iteration, state.mode.value, mode.value))
        state.mode = mode
        state.switch_count += 1
        self._emit(state, 'mode', multiplier=multiplier)

    def run(self, state):
        opts = self.opts
        while state.iteration < self.cap:
            if state.switch_count > opts.max_switches:
                logger.warning('mode switch limit %d reached', opts.max_switches)
                break
            if state.mode is Mode.INTERIOR:
                result = self._interior(state)
            else:
                result = self._sphere(state)
            if result is not None:
                result.mode = state.mode.value
                logger.info('annulus solve finished in mode %s after %d switches (%s)',
                            state.mode.value, state.switch_count, result.status.value)
                return result
        kappa, _ = interior_multipliers(self.prob, state.x, state.working_set)
        return self._point(state, kappa, 0.0, KktStatus.ITERATION_CAP)

    def _point(self, state, kappa, mu, status):
        components = kkt_components(self.prob, state.x, kappa, mu)
        return KktPoint(x=state.x, kappa=kappa, mu=mu, kkt_residual=max(components.values()), status=status,
                        iterations=state.iteration, objective=self.prob.objective(state.x),
                        working_set=state.working_set.key(), components=components, mode=state.mode.value)

    def _sphere(self, state):
        if state.mode is Mode.SPHERE_MAX:
            radius, sign = self.prob.r_max, 1.0
        else:
            radius, sign = self.prob.r_min, -1.0
        solver = FixedNormSolver(self.prob, self.opts, self.callback, radius=radius, norm_sign=sign,
                                 iteration_offset=state.iteration)
        solver.cap = self.cap
        result = solver.run(state.x, state.working_set)
        state.iteration = result.iterations
        if result.status is not KktStatus.NORM_RELEASED:
            return result
        if self.prob.objective(result.x) <= self.prob.objective(state.x) + 1e-12 * max(1.0, abs(self.prob.objective(state.x))):
            state.x = result.x
        self._switch(state, Mode.INTERIOR, multiplier=result.mu)
        return None

    def _interior(self, state):
        prob, opts = self.prob, self.opts
        while state.iteration < self.cap:
            state.iteration += 1
            step = qp_active_set_step(prob, state.x, state.working_set, opts)
            f_old = prob.objective(state.x)
            if prob.objective(step.x) <= f_old + 1e-12 * max(1.0, abs(f_old)):
                state.x = step.x
            if step.event is QpEvent.HIT_INEQUALITY:
                if state.working_set.can_add(step.index):
                    state.working_set.add(step.index)
                self._emit(state, 'qp', added=step.index)
                continue
            if step.event is QpEvent.HIT_SPHERE_MAX:
                self._switch(state, Mode.SPHERE_MAX)
                return None
            if step.event is QpEvent.HIT_SPHERE_MIN:
                self._switch(state, Mode.SPHERE_MIN)
                return None
            if step.event is QpEvent.MOVED:
                self._emit(state, 'qp')
                continue

            kappa, _ = interior_multipliers(prob, state.x, state.working_set)
            active = list(state.working_set.indices)
            tol = opts.kkt_tol * max(1.0, float(np.abs(prob.gradient(state.x)).max(initial=0.0)))
            min_kappa = min((kappa[i] for i in active), default=np.inf)
            if min_kappa >= -tol:
                result = self._point(state, kappa, 0.0, KktStatus.OPTIMAL)
                self._emit(state, 'stop', kkt_error=result.kkt_residual)
                return result
            signature = (state.working_set.key(), round(prob.objective(state.x), 10))
            if signature in self.seen:
                logger.warning('interior working set revisited at iteration %d; stopping', state.iteration)
                return self._point(state, kappa, 0.0, KktStatus.ITERATION_CAP)
            self.seen.add(signature)
            drop = min(active, key=lambda i: (kappa[i], i))
            state.working_set.remove(drop)
            self._emit(state, 'drop', dropped=drop, multiplier=float(kappa[drop]))
        return None


def solve(prob, x0, opts=None, callback=None, working_set=()):
    """Local minimizer of the QP over the annulus and polytope from a feasible x0.

    With r_min == r_max this is exactly solve_fixed_norm. The returned
    KktPoint carries the mode it ended in; on the inner sphere mu <= 0 and
    mu_lower = -mu is the bound's multiplier.

    Raises:
        InfeasibleError: x0 violates the constraints.
    """
    opts = opts or SolverOptions()
    x0 = np.asarray(x0, dtype=float)
    if prob.r_min == prob.r_max:
        result = solve_fixed_norm(prob, x0, working_set, opts, callback)
        result.mode = Mode.SPHERE_MAX.value
        return result
    norm = float(np.linalg.norm(x0))
    slack = 1e-6 * max(1.0, prob.r_max)
    if norm > prob.r_max + slack or norm < prob.r_min - slack or \
            prob.violation(x0) > 1e-6 * max(1.0, float(np.abs(prob.b).max(initial=0.0))):
        raise InfeasibleError(f'start point is not feasible (norm {norm:.6g}, violation {prob.violation(x0):.3e})')
    mode = mode_for(prob, x0, tol=1e-9)
    if mode is Mode.SPHERE_MAX:
        x0 = x0 * (prob.r_max / norm)
    elif mode is Mode.SPHERE_MIN:
        x0 = x0 * (prob.r_min / norm)
    ws = WorkingSet(prob, rank_tol=1e-8)
    for i in working_set:
        if ws.can_add(i):
            ws.add(i)
    state = ModeState(mode=mode, x=x0, working_set=ws)
    return AnnulusSolver(prob, opts, callback).run(state)
