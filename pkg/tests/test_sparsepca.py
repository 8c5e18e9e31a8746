import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from services.errors import PreconditionError
from services.sparsepca import (
    DataMatrix,
    SparsePcaProblem,
    deflate,
    explained_variance,
    gamma_search,
    merge,
    polish,
    principal_components,
    reformulate,
    solve_component,
    split,
    support_of,
    truncated_init,
)


@pytest.fixture
def planted():
    """Samples whose first three features share a strong common factor."""
    rng = np.random.default_rng(7)
    k, n = 300, 10
    z = rng.standard_normal(k)
    D = 0.1 * rng.standard_normal((k, n))
    D[:, :3] += 5.0 * z[:, None]
    return DataMatrix(sp.csr_matrix(D))


def _centered(D):
    D = np.asarray(D, dtype=float)
    return D - D.mean(axis=0)


class TestDataMatrix:

    def test_products_match_centered_dense(self, rng):
        D = rng.poisson(1.0, size=(20, 6)).astype(float)
        data = DataMatrix(sp.csr_matrix(D))
        Dc = _centered(D)
        v = rng.standard_normal(6)
        u = rng.standard_normal(20)
        assert_allclose(data.matvec(v), Dc @ v, atol=1e-12)
        assert_allclose(data.rmatvec(u), Dc.T @ u, atol=1e-12)
        assert_allclose(data.covariance_operator().matvec(v), np.cov(D, rowvar=False) @ v, atol=1e-12)
        assert_allclose(data.dense(), Dc, atol=1e-12)

    def test_column_variances(self, rng):
        D = rng.poisson(2.0, size=(30, 5)).astype(float)
        data = DataMatrix(sp.csr_matrix(D))
        assert_allclose(data.column_variances(), D.var(axis=0, ddof=1), atol=1e-12)

    def test_column_variances_after_deflation(self, rng):
        D = rng.standard_normal((25, 5))
        x = rng.standard_normal(5)
        x /= np.linalg.norm(x)
        deflated = DataMatrix(sp.csr_matrix(D)).deflated(x)
        expected = (deflated.dense() ** 2).sum(axis=0) / 24
        assert_allclose(deflated.column_variances(), expected, atol=1e-12)

    def test_uncentered(self, rng):
        D = rng.standard_normal((10, 4))
        data = DataMatrix(sp.csr_matrix(D), centered=False)
        v = rng.standard_normal(4)
        assert_allclose(data.matvec(v), D @ v, atol=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(PreconditionError):
            DataMatrix(sp.csr_matrix(np.ones((1, 3))))


class TestReformulation:

    def test_split_then_merge(self):
        x = np.array([0.6, -0.8, 0.0])
        w = split(x, 2.0)
        assert_allclose(w, [0.6, 0.0, 0.0, 0.0, 0.8, 0.0])
        assert_allclose(merge(w, 3), x)

    def test_split_respects_budget(self):
        w = split(np.array([0.6, -0.8]), 1.2)
        assert w.sum() == pytest.approx(1.2)
        assert np.all(w >= 0)

    def test_objective_is_negative_variance(self, rng):
        D = rng.standard_normal((15, 4))
        data = DataMatrix(sp.csr_matrix(D))
        prob = SparsePcaProblem(data, gamma=2.0).to_norm_qp()
        x = np.array([0.5, -0.5, 0.5, -0.5])
        w = split(x, 2.0)
        S = np.cov(D, rowvar=False)
        assert prob.objective(w) == pytest.approx(-x @ S @ x)
        assert prob.n == 8
        assert prob.m == 9
        assert prob.bound_column(1) == 0

    def test_nonneg_drops_second_block(self, rng):
        data = DataMatrix(sp.csr_matrix(rng.standard_normal((10, 3))))
        prob = reformulate(data.covariance_operator(), 1.5, nonneg=True)
        assert prob.n == 3
        assert_allclose(prob.b, [1.5, 0.0, 0.0, 0.0])

    def test_budget_below_one(self, rng):
        data = DataMatrix(sp.csr_matrix(rng.standard_normal((10, 3))))
        with pytest.raises(PreconditionError):
            reformulate(data.covariance_operator(), 0.5)


class TestComponents:

    def test_unit_budget_picks_largest_variance_column(self, rng):
        D = rng.standard_normal((40, 5)) * np.array([1.0, 3.0, 0.5, 2.0, 1.0])
        data = DataMatrix(sp.csr_matrix(D))
        sol = solve_component(data, 1.0, np.ones(5))
        assert_allclose(sol.support, [1])
        assert sol.variance == pytest.approx(D[:, 1].var(ddof=1))

    def test_large_budget_gives_leading_eigenvector(self, planted):
        sol = solve_component(planted, np.sqrt(planted.n), truncated_init(planted, 3))
        S = np.cov(planted.dense(), rowvar=False)
        top = np.linalg.eigvalsh(S)[-1]
        assert sol.variance == pytest.approx(top, rel=1e-6)
        assert np.linalg.norm(sol.x) == pytest.approx(1.0)

    def test_gamma_search_recovers_planted_support(self, planted):
        sol = gamma_search(planted, 3)
        assert sol.exact
        assert set(sol.support.tolist()) == {0, 1, 2}
        assert sol.history

    def test_gamma_search_single_coordinate(self, planted):
        sol = gamma_search(planted, 1)
        assert sol.cardinality == 1
        assert sol.exact

    def test_truncated_init(self, planted):
        x = truncated_init(planted, 3)
        assert np.count_nonzero(x) <= 3
        assert np.all(x >= 0)
        assert np.linalg.norm(x) == pytest.approx(1.0)
        assert set(np.flatnonzero(x).tolist()) == {0, 1, 2}

    def test_support_of(self):
        assert_allclose(support_of(np.array([1.0, 1e-9, -0.5, 0.0])), [0, 2])
        assert support_of(np.zeros(3)).size == 0


class TestPolishAndDeflate:

    def test_polish_single_column(self, rng):
        data = DataMatrix(sp.csr_matrix(rng.standard_normal((12, 4))))
        assert_allclose(polish(data, [2]), [0.0, 0.0, 1.0, 0.0])

    def test_polish_maximizes_on_support(self, planted):
        x = polish(planted, [0, 1, 2])
        assert np.linalg.norm(x) == pytest.approx(1.0)
        assert np.all(x[3:] == 0.0)
        assert explained_variance(planted, x) >= explained_variance(planted, np.array([1.0] + [0.0] * 9))

    def test_deflation_annihilates_component(self, rng):
        data = DataMatrix(sp.csr_matrix(rng.standard_normal((15, 4))))
        x = np.array([0.5, 0.5, 0.5, 0.5])
        deflated = deflate(data, x)
        assert_allclose(deflated.matvec(x), 0.0, atol=1e-12)
        assert explained_variance(deflated, x) == pytest.approx(0.0, abs=1e-20)

    def test_deflation_needs_unit_vector(self, rng):
        data = DataMatrix(sp.csr_matrix(rng.standard_normal((15, 4))))
        with pytest.raises(PreconditionError):
            deflate(data, np.ones(4))


@pytest.mark.slow
def test_principal_components(planted):
    components = principal_components(planted, 2, 3)
    assert len(components) == 2
    assert set(components[0].support.tolist()) == {0, 1, 2}
    assert components[0].variance > components[1].variance
    for comp in components:
        assert np.linalg.norm(comp.x) == pytest.approx(1.0)


@pytest.mark.slow
def test_nonnegative_components(planted):
    components = principal_components(planted, 1, 3, nonneg=True)
    assert np.all(components[0].x >= 0)
    assert set(components[0].support.tolist()) == {0, 1, 2}


def _with_covariance(S, k=50, seed=0):
    """Samples whose sample covariance is exactly S."""
    Z = np.random.default_rng(seed).standard_normal((k, S.shape[0]))
    Q = np.linalg.qr(Z - Z.mean(axis=0))[0]
    return DataMatrix(sp.csr_matrix(np.sqrt(k - 1) * Q @ np.linalg.cholesky(S).T))


def _grid_variance(S, gamma, samples=200001):
    theta = np.linspace(0.0, 2 * np.pi, samples)
    X = np.column_stack([np.cos(theta), np.sin(theta)])
    X = X[np.abs(X).sum(axis=1) <= gamma]
    return float(np.max(np.einsum('ij,jk,ik->i', X, S, X)))


class TestReformulationEquivalence:

    S = np.array([[4.0, 0.5], [0.5, 1.0]])

    @pytest.mark.parametrize('gamma', [1.2, 1.35])
    def test_matches_grid_solve(self, gamma):
        data = _with_covariance(self.S)
        assert_allclose(np.cov(data.dense(), rowvar=False), self.S, atol=1e-10)
        sol = solve_component(data, gamma, truncated_init(data, 2))
        assert sol.variance == pytest.approx(_grid_variance(self.S, gamma), abs=1e-4)
        assert np.abs(sol.x).sum() <= gamma + 1e-8
        assert sol.w[:2] @ sol.w[2:] <= 1e-8


@pytest.mark.slow
def test_planted_support_recovery_at_scale():
    recovered = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        k, n = 200, 500
        support = np.sort(rng.choice(n, size=5, replace=False))
        z = rng.standard_normal(k)
        D = rng.standard_normal((k, n))
        D[:, support] += 3.0 * z[:, None]
        sol = gamma_search(DataMatrix(sp.csr_matrix(D)), 5)
        recovered += sol.exact and set(sol.support.tolist()) == set(support.tolist())
    assert recovered >= 9
