import numpy as np
import pytest
import scipy.linalg as la
from numpy.testing import assert_allclose
from scipy.optimize import linear_sum_assignment

from services.errors import HardCaseSignal, InfeasibleError, PoleError, PreconditionError
from services.numerics import NullspaceProjector, as_dense, make_operator
from services.options import SolverOptions
from services.trs import (
    SecularFn,
    TrsKind,
    TrsProblem,
    _Pair,
    build_m_operator,
    classify_local_nonglobal,
    extract_minimizer,
    secular_deriv,
    secular_eval,
    secular_roots,
    smallest_reduced_pair,
    solve_trs,
    translate_inhomogeneous,
    trs_objective,
)


def _kkt_residual(P, q, x, mu):
    return np.linalg.norm(P @ x + mu * x + q)


def _sym(rng, n):
    G = rng.standard_normal((n, n))
    return (G + G.T) / 2


def _dense_m(P, q, r):
    n = q.size
    return np.block([[-P, np.outer(q, q) / r ** 2], [np.eye(n), -P]])


def _enumerated_local_nonglobal(P, q, r):
    """Whether some real eigenvalue of M gives a strict local, non-global minimizer."""
    n = q.size
    lam = np.linalg.eigvalsh(P)
    for mu in la.eigvals(_dense_m(P, q, r)):
        if abs(mu.imag) > 1e-8 * max(1.0, abs(mu)):
            continue
        mu = mu.real
        if mu >= -lam[0] - 1e-9 or np.min(np.abs(lam + mu)) < 1e-9:
            continue
        shifted = P + mu * np.eye(n)
        x = np.linalg.solve(shifted, -q)
        if abs(np.linalg.norm(x) - r) > 1e-6 * r:
            continue
        Z = la.null_space(x[None, :])
        if np.linalg.eigvalsh(Z.T @ shifted @ Z).min() > 1e-9:
            return True
    return False


def _circle_local_minima(P, q, r, samples=100000):
    theta = np.linspace(0.0, 2 * np.pi, samples, endpoint=False)
    X = r * np.column_stack([np.cos(theta), np.sin(theta)])
    f = 0.5 * np.einsum('ij,jk,ik->i', X, P, X) + X @ q
    is_min = (f < np.roll(f, 1)) & (f < np.roll(f, -1))
    return X[is_min], f[is_min]


class TestSecularFunction:

    def setup_method(self):
        self.f = SecularFn.from_problem(np.diag([1.0, 2.0]), np.array([1.0, 1.0]), 1.0)

    def test_values(self):
        assert secular_eval(self.f, 0.0) == pytest.approx(0.25)
        assert secular_eval(self.f, -3.0) == pytest.approx(0.25)

    def test_derivative_matches_finite_difference(self):
        h = 1e-6
        fd = (secular_eval(self.f, 0.5 + h) - secular_eval(self.f, 0.5 - h)) / (2 * h)
        assert secular_deriv(self.f, 0.5) == pytest.approx(fd, rel=1e-6)

    def test_pole(self):
        with pytest.raises(PoleError):
            secular_eval(self.f, -1.0)

    def test_roots_are_zeros(self):
        roots = secular_roots(self.f)
        assert roots.size == 4
        for root in roots[np.abs(roots.imag) < 1e-10].real:
            assert secular_eval(self.f, root) == pytest.approx(0.0, abs=1e-8)

    def test_zero_weight_is_not_a_pole(self):
        f = SecularFn.from_problem(np.diag([1.0, 2.0]), np.array([0.0, 0.5]), 1.0)
        assert secular_eval(f, -1.0) == pytest.approx(-0.75)
        assert np.isfinite(secular_deriv(f, -1.0))
        with pytest.raises(PoleError):
            secular_eval(f, -2.0)

    def test_roots_match_eigenvalues_of_m(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 7))
            P = _sym(rng, n)
            q = rng.standard_normal(n)
            r = float(rng.uniform(0.5, 2.0))
            roots = secular_roots(SecularFn.from_problem(P, q, r))
            values = la.eigvals(_dense_m(P, q, r))
            assert roots.size == values.size == 2 * n
            cost = np.abs(values[:, None] - roots[None, :])
            rows, cols = linear_sum_assignment(cost)
            tol = 1e-6 * np.maximum(1.0, np.abs(values[rows]))
            assert np.all(cost[rows, cols] <= tol)

    def test_complex_shift_lowers_real_part(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 6))
            f = SecularFn.from_problem(_sym(rng, n), rng.standard_normal(n), float(rng.uniform(0.5, 2.0)))
            for _ in range(50):
                a = float(rng.uniform(-4.0, 4.0))
                if np.min(np.abs(f.eigvalues + a)) < 1e-3:
                    continue
                b = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 3.0))
                assert secular_eval(f, complex(a, b)).real < secular_eval(f, a)


class TestMOperator:

    def test_matches_projected_dense_m(self, rng):
        n, r, alpha = 4, 1.5, 1.3
        P = _sym(rng, n)
        q = rng.standard_normal(n)
        A = rng.standard_normal((1, n))
        prob = TrsProblem(P=P, q=q, r=r, A=A, b=np.zeros(1))
        Z = la.null_space(A)
        Pi = Z @ Z.T
        Pi2 = la.block_diag(Pi, Pi)
        expected = Pi2 @ (_dense_m(P, q, r) + alpha * np.eye(2 * n)) @ Pi2
        assert_allclose(as_dense(build_m_operator(prob, NullspaceProjector(A), alpha)), expected, atol=1e-12)


class TestExtractMinimizer:

    def test_positive_overlap_flips_sign(self):
        x = extract_minimizer(np.array([1.0, 0.0, 1.0, 0.0]), np.array([1.0, 0.0]), 2.0)
        assert_allclose(x, [-2.0, 0.0])

    def test_negative_overlap_keeps_sign(self):
        x = extract_minimizer(np.array([0.0, 1.0, -1.0, 0.0]), np.array([1.0, 0.0]), 1.0)
        assert_allclose(x, [0.0, 1.0])

    def test_complex_phase_removed(self):
        x = extract_minimizer(1j * np.array([1.0, 0.0, 1.0, 0.0]), np.array([1.0, 0.0]), 2.0)
        assert_allclose(x, [-2.0, 0.0], atol=1e-12)

    def test_vanishing_block_signals_hard_case(self):
        with pytest.raises(HardCaseSignal):
            extract_minimizer(np.array([0.0, 0.0, 1.0, 0.0]), np.array([1.0, 0.0]), 1.0)


class TestLocalNonglobal:

    P = np.diag([-1.0, 1.0])
    q = np.array([0.2, 0.2])

    def _pairs(self):
        values, vectors = la.eig(_dense_m(self.P, self.q, 1.0))
        order = np.lexsort((-values.imag, -values.real))
        return [_Pair(mu=complex(values[i]), z=vectors[:, i] / np.linalg.norm(vectors[:, i])) for i in order]

    def test_second_pair_gives_local_point(self):
        pairs = self._pairs()
        neighbours = [p.mu for i, p in enumerate(pairs) if i != 1]
        x, mu = classify_local_nonglobal(pairs[1], neighbours, np.array([1.0, -1.0]), False, self.q, 1.0)
        outcome = solve_trs(TrsProblem(P=self.P, q=self.q, r=1.0))
        assert_allclose(x, outcome.local_point, atol=1e-10)
        assert mu == pytest.approx(outcome.local_multiplier)

    def test_rejections(self):
        pairs = self._pairs()
        assert classify_local_nonglobal(pairs[1], [], None, True, self.q, 1.0) is None
        assert classify_local_nonglobal(None, [], None, False, self.q, 1.0) is None
        complex_pair = _Pair(mu=complex(0.1, 0.5), z=pairs[1].z)
        assert classify_local_nonglobal(complex_pair, [], None, False, self.q, 1.0) is None
        assert classify_local_nonglobal(pairs[1], [pairs[1].mu], None, False, self.q, 1.0) is None

    def test_matches_circle_scan(self):
        points, values = _circle_local_minima(self.P, self.q, 1.0)
        assert len(points) == 2
        outcome = solve_trs(TrsProblem(P=self.P, q=self.q, r=1.0))
        assert outcome.kind is TrsKind.GLOBAL_AND_LOCAL
        order = np.argsort(values)
        assert_allclose(outcome.x, points[order[0]], atol=1e-4)
        assert_allclose(outcome.local_point, points[order[1]], atol=1e-4)

    def test_verdict_matches_enumeration(self, rng):
        disagreements = 0
        for _ in range(100):
            n = int(rng.integers(2, 5))
            P, q, r = _sym(rng, n), rng.standard_normal(n), float(rng.uniform(0.5, 2.0))
            outcome = solve_trs(TrsProblem(P=P, q=q, r=r))
            disagreements += (outcome.kind is TrsKind.GLOBAL_AND_LOCAL) != _enumerated_local_nonglobal(P, q, r)
        assert disagreements <= 1


class TestTranslateInhomogeneous:

    def test_shrinks_radius(self):
        x0, r_tilde, _ = translate_inhomogeneous(np.array([[1.0, 0.0]]), np.array([3.0]), 5.0)
        assert_allclose(x0, [3.0, 0.0])
        assert r_tilde == pytest.approx(4.0)

    def test_sphere_misses_affine_set(self):
        with pytest.raises(InfeasibleError):
            translate_inhomogeneous(np.array([[1.0, 0.0]]), np.array([2.0]), 1.0)

    def test_shifts_linear_term(self):
        P = np.diag([2.0, 1.0])
        _, _, q_tilde = translate_inhomogeneous(np.array([[1.0, 0.0]]), np.array([1.0]), 2.0, P, np.zeros(2))
        assert_allclose(q_tilde, [2.0, 0.0])


class TestSolveTrs:

    def test_unique_global(self):
        P = np.eye(3)
        q = np.array([-1.0, 0.0, 0.0])
        outcome = solve_trs(TrsProblem(P=P, q=q, r=1.0))
        assert outcome.kind is TrsKind.UNIQUE_GLOBAL
        assert_allclose(outcome.x, [1.0, 0.0, 0.0], atol=1e-8)
        assert outcome.global_multiplier == pytest.approx(0.0, abs=1e-8)
        assert outcome.diagnostics['stationarity'] < 1e-8

    def test_hard_case_pair(self):
        P = np.diag([1.0, 2.0])
        q = np.array([0.0, 0.5])
        outcome = solve_trs(TrsProblem(P=P, q=q, r=1.0))
        assert outcome.kind is TrsKind.HARD_CASE_PAIR
        assert outcome.global_multiplier == pytest.approx(-1.0)
        points = sorted((tuple(p) for p in outcome.global_points), key=lambda p: p[0])
        assert_allclose(points, [(-np.sqrt(3) / 2, -0.5), (np.sqrt(3) / 2, -0.5)], atol=1e-8)
        assert_allclose(outcome.objective(P, q), [0.375, 0.375], atol=1e-10)

    def test_global_and_local(self):
        P = np.diag([-1.0, 1.0])
        q = np.array([0.2, 0.2])
        outcome = solve_trs(TrsProblem(P=P, q=q, r=1.0))
        assert outcome.kind is TrsKind.GLOBAL_AND_LOCAL
        f_global, f_local = outcome.objective(P, q)
        assert f_global < f_local
        assert -1.0 < outcome.local_multiplier < 1.0
        assert outcome.global_multiplier > 1.0
        assert np.linalg.norm(outcome.local_point) == pytest.approx(1.0)
        assert _kkt_residual(P, q, outcome.local_point, outcome.local_multiplier) < 1e-8

    def test_convex_interior_in_ball_mode(self):
        outcome = solve_trs(TrsProblem(P=np.eye(2), q=np.array([-0.5, 0.0]), r=1.0, boundary_only=False))
        assert outcome.kind is TrsKind.INTERIOR_GLOBAL
        assert_allclose(outcome.x, [0.5, 0.0], atol=1e-10)
        assert outcome.global_multiplier == 0.0

    def test_equality_constrained(self):
        P = np.diag([1.0, -1.0, 2.0])
        prob = TrsProblem(P=P, q=np.zeros(3), r=1.0, A=np.array([[1.0, 0.0, 0.0]]), b=np.array([0.5]))
        outcome = solve_trs(prob)
        assert outcome.kind is TrsKind.HARD_CASE_PAIR
        for x in outcome.global_points:
            assert x[0] == pytest.approx(0.5)
            assert abs(x[1]) == pytest.approx(np.sqrt(0.75))
            assert trs_objective(P, np.zeros(3), x) == pytest.approx(-0.25)

    def test_arnoldi_agrees_with_dense(self, rng):
        n = 60
        G = rng.standard_normal((n, n))
        P = (G + G.T) / 2
        q = rng.standard_normal(n)
        prob = TrsProblem(P=P, q=q, r=2.0)
        sparse = solve_trs(prob, SolverOptions(dense_max_dim=10))
        dense = solve_trs(prob, SolverOptions(force_dense=True))
        assert sparse.diagnostics['solver'] in ('arnoldi', 'dense')
        assert sparse.global_multiplier == pytest.approx(dense.global_multiplier, rel=1e-7)
        assert sparse.objective(P, q)[0] == pytest.approx(dense.objective(P, q)[0], rel=1e-8)
        assert np.linalg.norm(sparse.x) == pytest.approx(2.0)

    def test_global_beats_random_sphere_points(self, rng):
        n = 8
        G = rng.standard_normal((n, n))
        P = (G + G.T) / 2
        q = rng.standard_normal(n)
        outcome = solve_trs(TrsProblem(P=P, q=q, r=1.5))
        best = outcome.objective(P, q)[0]
        samples = rng.standard_normal((500, n))
        samples = 1.5 * samples / np.linalg.norm(samples, axis=1, keepdims=True)
        assert all(trs_objective(P, q, s) >= best - 1e-10 for s in samples)
        assert np.min(np.linalg.eigvalsh(P + outcome.global_multiplier * np.eye(n))) > -1e-8

    def test_shift_does_not_change_answer(self):
        P = np.diag([-1.0, 1.0])
        q = np.array([0.2, 0.2])
        a = solve_trs(TrsProblem(P=P, q=q, r=1.0))
        b = solve_trs(TrsProblem(P=P, q=q, r=1.0), shift=10.0)
        assert a.global_multiplier == pytest.approx(b.global_multiplier)
        assert b.shift_used == 10.0

    def test_needs_two_free_dimensions(self):
        with pytest.raises(PreconditionError):
            TrsProblem(P=np.eye(2), q=np.zeros(2), r=1.0, A=np.array([[1.0, 0.0]]))


class TestHardCaseConstruction:

    def test_constructed_instances(self, rng):
        for _ in range(20):
            n = int(rng.integers(3, 8))
            Q = la.qr(rng.standard_normal((n, n)))[0]
            lam = np.concatenate([[-1.0], rng.uniform(1.0, 3.0, n - 1)])
            P = Q @ np.diag(lam) @ Q.T
            P = (P + P.T) / 2
            c = rng.standard_normal(n - 1)
            q = Q[:, 1:] @ (c / np.linalg.norm(c))
            outcome = solve_trs(TrsProblem(P=P, q=q, r=1.0))
            assert outcome.kind is TrsKind.HARD_CASE_PAIR
            mu = outcome.global_multiplier
            assert mu == pytest.approx(1.0, abs=1e-8)
            for x in outcome.global_points:
                assert np.linalg.norm(x) == pytest.approx(1.0, abs=1e-8)
                assert _kkt_residual(P, q, x, mu) <= 1e-8
            f1, f2 = outcome.objective(P, q)
            assert f1 == pytest.approx(f2, abs=1e-10)


class TestZeroLinearTerm:

    @pytest.mark.parametrize('seed', range(6))
    def test_large_instance_is_hard_case_pair(self, seed):
        rng = np.random.default_rng(seed)
        n, r = 60, 2.0
        P = _sym(rng, n)
        outcome = solve_trs(TrsProblem(P=P, q=np.zeros(n), r=r), SolverOptions(dense_max_dim=10))
        lam1 = np.linalg.eigvalsh(P)[0]
        assert outcome.kind is TrsKind.HARD_CASE_PAIR
        assert outcome.global_multiplier == pytest.approx(-lam1, rel=1e-8)
        for x in outcome.global_points:
            assert np.linalg.norm(x) == pytest.approx(r)
            assert _kkt_residual(P, np.zeros(n), x, outcome.global_multiplier) <= 1e-7
        assert_allclose(outcome.objective(P, np.zeros(n)), [0.5 * lam1 * r ** 2] * 2, rtol=1e-8)

    def test_tiny_linear_term(self, rng):
        P = _sym(rng, 30)
        outcome = solve_trs(TrsProblem(P=P, q=1e-15 * np.ones(30), r=1.0), SolverOptions(dense_max_dim=10))
        assert outcome.kind is TrsKind.HARD_CASE_PAIR
        assert outcome.global_multiplier == pytest.approx(-np.linalg.eigvalsh(P)[0], rel=1e-8)

    def test_ball_mode_convex(self):
        outcome = solve_trs(TrsProblem(P=np.eye(3), q=np.zeros(3), r=1.0, boundary_only=False))
        assert outcome.kind is TrsKind.INTERIOR_GLOBAL
        assert_allclose(outcome.x, 0.0)

    def test_ball_mode_indefinite(self):
        P = np.diag([-1.0, 2.0, 3.0])
        outcome = solve_trs(TrsProblem(P=P, q=np.zeros(3), r=1.0, boundary_only=False))
        assert outcome.kind is TrsKind.HARD_CASE_PAIR
        assert_allclose(sorted(p[0] for p in outcome.global_points), [-1.0, 1.0], atol=1e-12)


class TestSmallestReducedPair:

    def _check(self, P, A, lam, v):
        Z = la.null_space(A)
        assert lam == pytest.approx(np.linalg.eigvalsh(Z.T @ P @ Z)[0], rel=1e-8)
        assert np.linalg.norm(v) == pytest.approx(1.0)
        assert np.linalg.norm(A @ v) <= 1e-10
        residual = Z @ (Z.T @ (P @ v)) - lam * v
        assert np.linalg.norm(residual) <= 1e-6

    def test_dense_reduction(self, rng):
        P = _sym(rng, 6)
        A = rng.standard_normal((2, 6))
        lam, v = smallest_reduced_pair(make_operator(P), NullspaceProjector(A))
        self._check(P, A, lam, v)

    def test_lanczos_on_large_nullspace(self, rng):
        n = 450
        P = _sym(rng, n) / np.sqrt(n)
        A = rng.standard_normal((20, n))
        lam, v = smallest_reduced_pair(make_operator(P), NullspaceProjector(A))
        self._check(P, A, lam, v)


class TestEqualityReduction:

    def test_matches_nullspace_solve(self, rng):
        for _ in range(20):
            n = int(rng.integers(4, 9))
            m = int(rng.integers(1, min(3, n - 2) + 1))
            P = _sym(rng, n)
            q = rng.standard_normal(n)
            A = rng.standard_normal((m, n))
            u = rng.standard_normal(n)
            b = A @ (0.4 * u / np.linalg.norm(u))
            r = 1.5
            projected = solve_trs(TrsProblem(P=P, q=q, r=r, A=A, b=b))

            Z = la.null_space(A)
            x0 = la.lstsq(A, b)[0]
            P_red = Z.T @ P @ Z
            reduced = solve_trs(TrsProblem(P=(P_red + P_red.T) / 2, q=Z.T @ (P @ x0 + q),
                                           r=float(np.sqrt(r ** 2 - x0 @ x0))),
                                SolverOptions(force_dense=True))
            x_red = x0 + Z @ reduced.x
            assert trs_objective(P, q, projected.x) == pytest.approx(trs_objective(P, q, x_red), abs=1e-7)
            assert_allclose(A @ projected.x, b, atol=1e-9)
            assert np.linalg.norm(projected.x) == pytest.approx(r)


@pytest.mark.slow
def test_local_nonglobal_verdicts_over_many_instances():
    rng = np.random.default_rng(2024)
    disagreements = 0
    for _ in range(500):
        n = int(rng.integers(2, 5))
        P, q, r = _sym(rng, n), rng.standard_normal(n), float(rng.uniform(0.5, 2.0))
        outcome = solve_trs(TrsProblem(P=P, q=q, r=r))
        disagreements += (outcome.kind is TrsKind.GLOBAL_AND_LOCAL) != _enumerated_local_nonglobal(P, q, r)
    assert disagreements <= 1


