import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose, assert_array_almost_equal

from services.errors import InconsistentSystemError, NotSymmetricError, PreconditionError, RankDeficientError
from services.numerics import (
    NullspaceProjector,
    arnoldi_rightmost,
    gershgorin_bound,
    make_operator,
    min_length_solve,
    projected_min_eig,
    spectral_upper_bound,
    sym_eig_dense,
)


class TestSymEigDense:

    def test_diagonal_values_ascending(self):
        eig = sym_eig_dense(np.diag([2.0, -1.0]))
        assert_allclose(eig.values, [-1.0, 2.0])
        assert_allclose(np.abs(eig.vectors), [[0.0, 1.0], [1.0, 0.0]], atol=1e-14)

    def test_sparse_input(self):
        P = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert_allclose(sym_eig_dense(P).values, [1.0, 3.0])

    def test_rejects_nonsymmetric(self):
        with pytest.raises(NotSymmetricError):
            sym_eig_dense(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestArnoldiRightmost:

    def test_small_diagonal(self):
        pairs = arnoldi_rightmost(np.diag([3.0, 1.0, -2.0]), 1, np.ones(3))
        assert pairs[0].value == pytest.approx(3.0)
        assert_allclose(np.abs(pairs[0].vector), [1.0, 0.0, 0.0], atol=1e-10)

    def test_rotation_reports_conjugate_pair(self):
        pairs = arnoldi_rightmost(np.array([[0.0, -1.0], [1.0, 0.0]]), 1, np.ones(2))
        values = sorted((p.value for p in pairs), key=lambda z: z.imag)
        assert len(values) == 2
        assert_allclose(values, [-1j, 1j], atol=1e-12)

    def test_large_operator_uses_arpack(self):
        n = 120
        op = make_operator(sp.diags(np.arange(n, dtype=float)))
        pairs = arnoldi_rightmost(op, 3, np.ones(n))
        assert_allclose([p.value.real for p in pairs[:3]], [119.0, 118.0, 117.0], rtol=1e-8)
        for p in pairs:
            assert_allclose(np.linalg.norm(p.vector), 1.0)

    def test_rejects_zero_start(self):
        with pytest.raises(PreconditionError):
            arnoldi_rightmost(np.eye(3), 1, np.zeros(3))


class TestNullspaceProjector:

    def test_projects_onto_nullspace(self):
        proj = NullspaceProjector(np.array([[1.0, 1.0]]))
        assert_array_almost_equal(proj.matvec(np.array([1.0, 0.0])), [0.5, -0.5])
        assert proj.rank == 1

    def test_idempotent_and_symmetric(self, rng):
        A = rng.standard_normal((2, 5))
        proj = NullspaceProjector(A)
        v = rng.standard_normal(5)
        w = rng.standard_normal(5)
        assert_allclose(proj.matvec(proj.matvec(v)), proj.matvec(v), atol=1e-12)
        assert proj.matvec(v) @ w == pytest.approx(v @ proj.matvec(w))
        assert_allclose(A @ proj.matvec(v), 0.0, atol=1e-12)

    def test_nullspace_basis_orthonormal(self, rng):
        A = rng.standard_normal((2, 6))
        Z = NullspaceProjector(A).nullspace_basis()
        assert Z.shape == (6, 4)
        assert_allclose(Z.T @ Z, np.eye(4), atol=1e-12)
        assert_allclose(A @ Z, 0.0, atol=1e-12)

    def test_no_rows_is_identity(self):
        proj = NullspaceProjector(None, n=3)
        assert_allclose(proj.matvec(np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_dependent_rows(self):
        with pytest.raises(RankDeficientError):
            NullspaceProjector(np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]]))


class TestMinLengthSolve:

    def test_singular_diagonal(self):
        x = min_length_solve(np.diag([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 1.0]))
        assert_allclose(x, [0.0, 1.0, 0.5], atol=1e-12)

    def test_inconsistent_rhs(self):
        with pytest.raises(InconsistentSystemError) as info:
            min_length_solve(np.diag([0.0, 1.0, 2.0]), np.array([1.0, 0.0, 0.0]))
        assert info.value.residual > 0.5

    def test_large_system_uses_minres(self):
        n = 500
        diag = np.concatenate([[0.0], np.linspace(1.0, 5.0, n - 1)])
        rhs = np.concatenate([[0.0], np.ones(n - 1)])
        x = min_length_solve(sp.diags(diag), rhs)
        assert x[0] == pytest.approx(0.0, abs=1e-8)
        assert_allclose(x[1:], 1.0 / diag[1:], rtol=1e-6)


def test_spectral_bounds_cover_largest_eigenvalue(rng):
    G = rng.standard_normal((6, 6))
    P = (G + G.T) / 2
    lam_max = np.linalg.eigvalsh(P)[-1]
    assert gershgorin_bound(P) >= lam_max
    assert spectral_upper_bound(P) > lam_max
    op = make_operator(P)
    assert spectral_upper_bound(op) > lam_max


def test_projected_min_eig():
    P = np.diag([3.0, -1.0, 2.0])
    Z = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    lam, d = projected_min_eig(P, Z)
    assert lam == pytest.approx(2.0)
    assert_allclose(np.abs(d), [0.0, 0.0, 1.0], atol=1e-12)
