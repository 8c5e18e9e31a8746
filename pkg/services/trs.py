"""Trust-region subproblem service.

Computes the global minimizer(s) of

    min 1/2 x^T P x + q^T x   s.t.  ||x|| = r  (or <= r),  A x = b

and, when one exists, the second-order sufficient local-nonglobal
minimizer. Both come from the two rightmost eigenpairs of the 2n x 2n
matrix M = [[-P, q q^T / r^2], [I, -P]], computed either densely on the
nullspace-reduced problem or by Arnoldi with every product projected onto
null(A).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from services.errors import (
    HardCaseSignal,
    InconsistentSystemError,
    InfeasibleError,
    InternalInconsistencyError,
    NeedsDenseFallback,
    NotSymmetricError,
    PoleError,
    PreconditionError,
)
from services.numerics import (
    DENSE_SOLVE_MAX_DIM,
    NullspaceProjector,
    arnoldi_rightmost,
    make_operator,
    min_length_solve,
    projected_min_eig,
    spectral_upper_bound,
    sym_eig_dense,
)
from services.options import SolverOptions

logger = logging.getLogger(__name__)


class TrsKind(Enum):
    UNIQUE_GLOBAL = 'UniqueGlobal'
    HARD_CASE_PAIR = 'HardCasePair'
    GLOBAL_AND_LOCAL = 'GlobalAndLocal'
    INTERIOR_GLOBAL = 'InteriorGlobal'


@dataclass(frozen=True)
class TrsProblem:
    P: object
    q: np.ndarray
    r: float
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    boundary_only: bool = True

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        object.__setattr__(self, 'q', q)
        n = q.size
        if self.P.shape != (n, n):
            raise PreconditionError(f'P has shape {self.P.shape}, expected {(n, n)}')
        if isinstance(self.P, np.ndarray):
            scale = max(1.0, float(np.abs(self.P).max(initial=0.0)))
            if np.abs(self.P - self.P.T).max(initial=0.0) > 1e-10 * scale:
                raise NotSymmetricError('P is not symmetric')
        if not self.r > 0:
            raise PreconditionError(f'radius must be positive, got {self.r}')
        if self.A is not None:
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            if A.shape[0] == 0:
                A = None
            elif A.shape[1] != n:
                raise PreconditionError(f'A has {A.shape[1]} columns, expected {n}')
            object.__setattr__(self, 'A', A)
        if self.A is None:
            object.__setattr__(self, 'b', None)
        else:
            b = np.zeros(self.A.shape[0]) if self.b is None else np.asarray(self.b, dtype=float).ravel()
            if b.size != self.A.shape[0]:
                raise PreconditionError(f'b has {b.size} entries, expected {self.A.shape[0]}')
            object.__setattr__(self, 'b', b)
        if n - self.m <= 1:
            raise PreconditionError(f'need n - m > 1, got n={n}, m={self.m}')

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return 0 if self.A is None else self.A.shape[0]


@dataclass(frozen=True)
class TrsOutcome:
    kind: TrsKind
    global_points: tuple
    global_multiplier: float
    local_point: Optional[np.ndarray] = None
    local_multiplier: Optional[float] = None
    shift_used: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def x(self):
        return self.global_points[0]

    def objective(self, P, q):
        """Objective values of the global points (and the local point, last, if any)."""
        values = [trs_objective(P, q, p) for p in self.global_points]
        if self.local_point is not None:
            values.append(trs_objective(P, q, self.local_point))
        return values

    def to_dict(self):
        return {
            'kind': self.kind.value,
            'global_points': [p.tolist() for p in self.global_points],
            'global_multiplier': self.global_multiplier,
            'local_point': None if self.local_point is None else self.local_point.tolist(),
            'local_multiplier': self.local_multiplier,
            'shift_used': self.shift_used,
            'diagnostics': self.diagnostics,
        }


@dataclass(frozen=True)
class SecularFn:
    eigvalues: np.ndarray
    weights: np.ndarray
    r: float

    @classmethod
    def from_problem(cls, P, q, r):
        eig = sym_eig_dense(P)
        return cls(eigvalues=eig.values, weights=(eig.vectors.T @ np.asarray(q, dtype=float)) ** 2, r=float(r))


def trs_objective(P, q, x):
    return float(0.5 * x @ make_operator(P).matvec(x) + q @ x)


def _check_pole(f, mu, pole_tol):
    active = f.weights > 0
    if np.any(active):
        gap = np.min(np.abs(f.eigvalues[active] + mu))
        if gap <= pole_tol * max(1.0, abs(mu)):
            raise PoleError(f'secular function evaluated at a pole (mu={mu})')


def secular_eval(f, mu, pole_tol=1e-14):
    """s(mu) = sum_i w_i / (lambda_i + mu)^2 - r^2, complex mu allowed.

    Terms with zero weight are left out, so -lambda_i is a pole only when
    w_i > 0.
    """
    _check_pole(f, mu, pole_tol)
    active = f.weights > 0
    value = np.sum(f.weights[active] / (f.eigvalues[active] + mu) ** 2) - f.r ** 2
    return complex(value) if np.iscomplexobj(mu) else float(value)


def secular_deriv(f, mu, pole_tol=1e-14):
    _check_pole(f, mu, pole_tol)
    active = f.weights > 0
    return float(-2.0 * np.sum(f.weights[active] / (f.eigvalues[active] + mu) ** 3))


def secular_roots(f):
    """Roots of the secular equation with denominators cleared.

    The polynomial is sum_i w_i prod_{j != i} (lambda_j + mu)^2
    - r^2 prod_j (lambda_j + mu)^2, of degree 2n.
    """
    poles = -np.asarray(f.eigvalues, dtype=float)
    doubled = np.concatenate([poles, poles])
    poly = -f.r ** 2 * np.poly(doubled)
    for i, w in enumerate(f.weights):
        others = np.delete(poles, i)
        poly = np.polyadd(poly, w * np.poly(np.concatenate([others, others])))
    return np.roots(poly)


def build_m_operator(prob, projector, alpha, q=None, r=None):
    """Projected, shifted M as a LinearOperator on [z1; z2]."""
    n = prob.n
    P_op = make_operator(prob.P)
    q = prob.q if q is None else q
    r2 = (prob.r if r is None else r) ** 2

    def matvec(v):
        v = np.ravel(v)
        z1 = projector.matvec(v[:n])
        z2 = projector.matvec(v[n:])
        top = -P_op.matvec(z1) + alpha * z1 + q * (q @ z2) / r2
        bottom = z1 - P_op.matvec(z2) + alpha * z2
        return np.concatenate([projector.matvec(top), projector.matvec(bottom)])

    return spla.LinearOperator((2 * n, 2 * n), matvec=matvec, dtype=float)


def shift_negative_definite(prob, projector=None):
    """Shift alpha with P - alpha I negative definite, and the objective constant."""
    alpha = spectral_upper_bound(prob.P)
    alpha = max(alpha, 0.0)
    return alpha, -0.5 * alpha * prob.r ** 2


def translate_inhomogeneous(A, b, r, P=None, q=None):
    """Move A x = b to a homogeneous system through the min-norm point x0.

    Returns (x0, r_tilde, q_tilde). r_tilde is 0 when the sphere touches
    the affine set in a single point.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    x0 = la.lstsq(A, b)[0]
    if np.linalg.norm(A @ x0 - b) > 1e-9 * max(1.0, np.linalg.norm(b)):
        raise InfeasibleError('equality constraints are inconsistent')
    gap = r ** 2 - x0 @ x0
    if gap < -1e-12 * r ** 2:
        raise InfeasibleError(
            f'sphere of radius {r} incompatible with equalities (min-norm point has norm {np.linalg.norm(x0):.6g})')
    r_tilde = float(np.sqrt(gap)) if gap > 1e-14 * r ** 2 else 0.0
    q_tilde = None
    if q is not None:
        q_tilde = np.asarray(q, dtype=float) + (make_operator(P).matvec(x0) if P is not None else 0.0)
    return x0, r_tilde, q_tilde


def rotate_to_real(z):
    """Remove the arbitrary complex phase of an eigenvector."""
    if not np.iscomplexobj(z):
        return np.asarray(z, dtype=float)
    theta = -0.5 * np.angle(np.sum(z * z))
    return np.real(z * np.exp(1j * theta))


def extract_minimizer(z, q, r, projector=None, hard_case_tol=1e-7):
    z = rotate_to_real(z)
    n = z.size // 2
    z1, z2 = z[:n], z[n:]
    norm_z1 = np.linalg.norm(z1)
    if norm_z1 <= hard_case_tol * np.linalg.norm(z):
        raise HardCaseSignal(f'first eigenvector block vanishes (|z1|/|z| = {norm_z1 / np.linalg.norm(z):.2e})')
    sign = 1.0 if q @ z2 >= 0 else -1.0
    x = -sign * r * z1 / norm_z1
    if projector is not None:
        x = projector.matvec(x)
    return x


def _shifted(P, mu):
    P_op = make_operator(P)
    n = P_op.shape[0]
    return spla.LinearOperator((n, n), matvec=lambda v: P_op.matvec(np.ravel(v)) + mu * np.ravel(v), dtype=float)


def hard_case_solutions(P, mu, q, z2, projector, r, tol=1e-8):
    """The two global minimizers x_min + a z2 of the hard case."""
    x_min = min_length_solve(_shifted(P, mu), -np.asarray(q, dtype=float), projector, tol=tol)
    d = np.real(z2)
    if projector is not None:
        d = projector.matvec(d)
    d = d / np.linalg.norm(d)
    # the min-length point is orthogonal to the kernel; remove drift
    x_min = x_min - (x_min @ d) * d
    disc = r ** 2 - x_min @ x_min
    if disc < -tol * r ** 2:
        raise InternalInconsistencyError(
            f'hard-case quadratic has no real root (|x_min| = {np.linalg.norm(x_min):.6g} > r = {r:.6g})')
    step = np.sqrt(max(disc, 0.0))
    return x_min - step * d, x_min + step * d


@dataclass
class _Pair:
    mu: complex
    z: np.ndarray

    @property
    def n(self):
        return self.z.size // 2

    def z1_ratio(self):
        # same phase as extract_minimizer sees
        z = rotate_to_real(self.z)
        return np.linalg.norm(z[:self.n]) / np.linalg.norm(z)


def classify_local_nonglobal(second, neighbours, neg_spectrum, hard_case, q, r, projector=None,
                             opts=None):
    """The local-nonglobal minimizer (x, mu) carried by the second pair, or None."""
    opts = opts or SolverOptions()
    if hard_case or second is None:
        return None
    mu = second.mu
    scale = max(1.0, abs(mu))
    if abs(mu.imag) > opts.imag_tol * scale:
        return None
    for other in neighbours:
        if abs(other - mu) <= opts.simple_tol * scale:
            return None
    mu = mu.real
    if second.z1_ratio() <= opts.hard_case_tol:
        return None
    if neg_spectrum is not None and np.min(np.abs(neg_spectrum - mu)) <= opts.spectrum_tol * scale:
        return None
    x = extract_minimizer(second.z, q, r, projector, opts.hard_case_tol)
    return x, float(mu)


def _dense_pairs(P_op, q, r, projector, alpha):
    Z = projector.nullspace_basis()
    d = Z.shape[1]
    P_red = Z.T @ np.asarray(P_op.matmat(Z))
    P_red = 0.5 * (P_red + P_red.T)
    q_red = Z.T @ q
    eye = np.eye(d)
    M = np.block([[-P_red + alpha * eye, np.outer(q_red, q_red) / r ** 2],
                  [eye, -P_red + alpha * eye]])
    values, vectors = la.eig(M)
    order = np.lexsort((-values.imag, -values.real))
    pairs = []
    for i in order:
        y = vectors[:, i]
        z = np.concatenate([Z @ y[:d], Z @ y[d:]])
        pairs.append(_Pair(mu=complex(values[i]) - alpha, z=z / np.linalg.norm(z)))
    return pairs, sym_eig_dense(P_red), Z


def _arnoldi_pairs(prob, P_op, q, r, projector, alpha, k, opts):
    n = prob.n
    rng = np.random.default_rng(opts.seed)
    start = np.concatenate([projector.matvec(rng.standard_normal(n)),
                            projector.matvec(rng.standard_normal(n))])
    projected = build_m_operator(prob, projector, alpha, q=q, r=r)
    if projector.rank:
        # push the range(A^T) blocks, where the projected operator is zero,
        # left of every nullspace eigenvalue
        floor = 2.0 * (alpha + max(0.0, spectral_upper_bound(-P_op))) + (q @ q) / r ** 2 + 1.0

        def matvec(v):
            v = np.ravel(v)
            inside = np.concatenate([projector.matvec(v[:n]), projector.matvec(v[n:])])
            return projected.matvec(v) - floor * (v - inside)

        op = spla.LinearOperator((2 * n, 2 * n), matvec=matvec, dtype=float)
    else:
        op = projected
    found = arnoldi_rightmost(op, k, start, tol=opts.arnoldi_tol, max_restarts=opts.max_restarts)
    pairs = []
    for pair in found:
        z = pair.vector
        kept = np.concatenate([projector.matvec(z[:n].real) + 1j * projector.matvec(z[:n].imag),
                               projector.matvec(z[n:].real) + 1j * projector.matvec(z[n:].imag)])
        # eigenvalue 0 of the projected operator lives on range(A^T)
        if np.linalg.norm(kept) < 0.5:
            continue
        pairs.append(_Pair(mu=pair.value - alpha, z=kept / np.linalg.norm(kept)))
    if len(pairs) < min(k, 2):
        raise NeedsDenseFallback('Arnoldi returned too few nullspace eigenpairs')
    return pairs


def smallest_reduced_pair(P_op, projector, opts=None):
    """Smallest eigenvalue of P on null(A) and a unit eigenvector in null(A).

    Small nullspaces are reduced densely. Otherwise Lanczos runs on
    Pi P Pi + c (I - Pi), where c lifts range(A^T) above the spectrum.
    """
    opts = opts or SolverOptions()
    n = P_op.shape[0]
    if opts.force_dense or n - projector.rank <= DENSE_SOLVE_MAX_DIM:
        lam, v = projected_min_eig(P_op, projector.nullspace_basis())
        return lam, v / np.linalg.norm(v)
    lift = spectral_upper_bound(P_op) + 1.0

    def matvec(v):
        v = np.ravel(v)
        inside = projector.matvec(v)
        return projector.matvec(P_op.matvec(inside)) + lift * (v - inside)

    op = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
    start = projector.matvec(np.random.default_rng(opts.seed).standard_normal(n))
    try:
        values, vectors = spla.eigsh(op, k=1, which='SA', v0=start, tol=opts.arnoldi_tol,
                                     maxiter=opts.max_restarts * n)
    except spla.ArpackError as e:
        logger.warning('Lanczos on the reduced Hessian failed (%s); reducing densely', e)
        lam, v = projected_min_eig(P_op, projector.nullspace_basis())
        return lam, v / np.linalg.norm(v)
    v = projector.matvec(vectors[:, 0])
    return float(values[0]), v / np.linalg.norm(v)


def _kernel_direction(first, reduced, Z, P_op, projector, opts):
    """Kernel vector of P + mu I inside the nullspace, and mu = -lambda_1."""
    if reduced is None:
        lam1, d = smallest_reduced_pair(P_op, projector, opts)
        return d, -lam1
    z2 = rotate_to_real(first.z)[first.n:]
    lam1 = reduced.values[0]
    cluster = np.abs(reduced.values - lam1) <= opts.spectrum_tol * max(1.0, abs(lam1))
    basis = Z @ reduced.vectors[:, cluster]
    d = basis @ (basis.T @ z2)
    if np.linalg.norm(d) < 1e-3 * np.linalg.norm(z2):
        d = basis[:, 0]
    return d / np.linalg.norm(d), -float(lam1)


def _degenerate_outcome(x0, alpha):
    return TrsOutcome(kind=TrsKind.UNIQUE_GLOBAL, global_points=(x0,), global_multiplier=0.0,
                      shift_used=alpha, diagnostics={'solver': 'degenerate'})


def solve_trs(prob, opts=None, shift=None):
    """Global and local-nonglobal minimizers of an equality-constrained TRS."""
    opts = opts or SolverOptions()
    n = prob.n
    projector = NullspaceProjector(prob.A, n=n, rank_tol=opts.rank_tol)
    x0 = np.zeros(n)
    r = float(prob.r)
    q = prob.q
    if prob.A is not None and np.any(prob.b):
        x0, r, q = translate_inhomogeneous(prob.A, prob.b, prob.r, prob.P, prob.q)
        if r == 0.0:
            return _degenerate_outcome(x0, 0.0)
    P_op = make_operator(prob.P)
    q = projector.matvec(q)

    if shift is None:
        alpha, _ = shift_negative_definite(prob, projector)
    else:
        alpha = float(shift)

    if np.linalg.norm(q) <= opts.hard_case_tol * max(1.0, abs(alpha)) * r:
        return _zero_linear_outcome(prob, P_op, q, x0, r, projector, alpha, opts)

    dim = n - projector.rank
    use_dense = opts.force_dense or 2 * dim <= opts.dense_max_dim
    reduced, Z, solver = None, None, 'dense'
    if not use_dense:
        try:
            pairs = _arnoldi_pairs(prob, P_op, q, r, projector, alpha, 2, opts)
            if len(pairs) == 2 and abs(pairs[1].mu.imag) <= opts.imag_tol * max(1.0, abs(pairs[1].mu)):
                pairs = _arnoldi_pairs(prob, P_op, q, r, projector, alpha, 3, opts)
            solver = 'arnoldi'
        except NeedsDenseFallback as e:
            logger.warning('Falling back to dense eigensolver: %s', e)
            use_dense = True
    if use_dense:
        pairs, reduced, Z = _dense_pairs(P_op, q, r, projector, alpha)

    first = pairs[0]
    mu_g = float(first.mu.real)
    if not prob.boundary_only and mu_g < -opts.mu_tol:
        return _interior_outcome(prob, P_op, q, x0, projector, alpha, mu_g, solver)

    hard_case = False
    ratio = first.z1_ratio()
    candidate = ratio <= opts.hard_case_tol
    if not candidate and reduced is not None:
        lam1 = reduced.values[0]
        candidate = abs(mu_g + lam1) <= opts.spectrum_tol * max(1.0, abs(lam1))
    if candidate:
        d, mu_hard = _kernel_direction(first, reduced, Z, P_op, projector, opts)
        try:
            points = hard_case_solutions(P_op, mu_hard, q, d, projector, r)
            hard_case = True
        except (InconsistentSystemError, InternalInconsistencyError) as e:
            if ratio <= opts.hard_case_tol:
                raise
            logger.debug('Near-hard case resolved by standard extraction: %s', e)

    if not hard_case:
        try:
            global_points = (x0 + extract_minimizer(first.z, q, r, projector, opts.hard_case_tol),)
        except HardCaseSignal as e:
            logger.debug('%s; resolving as hard case', e)
            lam1, d = smallest_reduced_pair(P_op, projector, opts)
            mu_hard = -lam1
            points = hard_case_solutions(P_op, mu_hard, q, d, projector, r)
            hard_case = True

    neg_spectrum = None if reduced is None else -reduced.values
    if hard_case:
        mu_g = mu_hard
        global_points = tuple(x0 + p for p in points)
        kind = TrsKind.HARD_CASE_PAIR
        local = None
    else:
        kind = TrsKind.UNIQUE_GLOBAL
        second = pairs[1] if len(pairs) > 1 else None
        neighbours = [p.mu for i, p in enumerate(pairs) if i != 1]
        if solver == 'arnoldi' and len(pairs) < 3:
            local = None
        else:
            local = classify_local_nonglobal(second, neighbours, neg_spectrum, False, q, r, projector, opts)
        if local is not None and not prob.boundary_only and local[1] < 0:
            local = None
        if local is not None:
            kind = TrsKind.GLOBAL_AND_LOCAL

    local_point = None if local is None else x0 + local[0]
    local_mu = None if local is None else local[1]
    diagnostics = _diagnostics(prob, P_op, projector, global_points, mu_g, local_point, local_mu, pairs, q, r,
                               reduced, solver)
    logger.debug('TRS solved: kind=%s mu=%.6g solver=%s', kind.value, mu_g, solver)
    return TrsOutcome(kind=kind, global_points=global_points, global_multiplier=mu_g,
                      local_point=local_point, local_multiplier=local_mu, shift_used=alpha,
                      diagnostics=diagnostics)


def _zero_linear_outcome(prob, P_op, q, x0, r, projector, alpha, opts):
    """With Pi q = 0 the problem is an eigenvector problem: x = +-r v_1."""
    lam1, d = smallest_reduced_pair(P_op, projector, opts)
    mu_g = -lam1
    solver = 'dense' if opts.force_dense or prob.n - projector.rank <= DENSE_SOLVE_MAX_DIM else 'lanczos'
    if not prob.boundary_only and mu_g < -opts.mu_tol:
        return _interior_outcome(prob, P_op, q, x0, projector, alpha, mu_g, solver)
    global_points = (x0 - r * d, x0 + r * d)
    diagnostics = _diagnostics(prob, P_op, projector, global_points, mu_g, None, None, [], q, r, None, solver)
    logger.debug('TRS solved: kind=%s mu=%.6g solver=%s', TrsKind.HARD_CASE_PAIR.value, mu_g, solver)
    return TrsOutcome(kind=TrsKind.HARD_CASE_PAIR, global_points=global_points, global_multiplier=mu_g,
                      shift_used=alpha, diagnostics=diagnostics)


def _interior_outcome(prob, P_op, q, x0, projector, alpha, mu_g, solver):
    y = min_length_solve(P_op, -q, projector)
    x = x0 + y
    stationarity = float(np.linalg.norm(projector.matvec(P_op.matvec(x) + prob.q)))
    return TrsOutcome(kind=TrsKind.INTERIOR_GLOBAL, global_points=(x,), global_multiplier=0.0,
                      shift_used=alpha,
                      diagnostics={'solver': solver, 'stationarity': stationarity,
                                   'boundary_multiplier': mu_g,
                                   'feasibility': float(max(0.0, np.linalg.norm(x) - prob.r))})


def _diagnostics(prob, P_op, projector, points, mu_g, local_point, local_mu, pairs, q, r, reduced, solver):
    candidates = [(p, mu_g) for p in points]
    if local_point is not None:
        candidates.append((local_point, local_mu))
    stationarity = 0.0
    feasibility = 0.0
    for x, mu in candidates:
        grad = P_op.matvec(x) + mu * x + prob.q
        stationarity = max(stationarity, float(np.linalg.norm(projector.matvec(grad))))
        feasibility = max(feasibility, abs(float(np.linalg.norm(x)) - prob.r))
        if prob.A is not None:
            feasibility = max(feasibility, float(np.abs(prob.A @ x - prob.b).max()))
    secular_residual = None
    if reduced is not None:
        f = SecularFn(eigvalues=reduced.values,
                      weights=(reduced.vectors.T @ (projector.nullspace_basis().T @ q)) ** 2, r=r)
        try:
            secular_residual = abs(secular_eval(f, mu_g, pole_tol=1e-10))
        except PoleError:
            secular_residual = None
    return {
        'solver': solver,
        'stationarity': stationarity,
        'feasibility': feasibility,
        'secular_residual': secular_residual,
        'rightmost': [[p.mu.real, p.mu.imag] for p in pairs[:3]],
    }
