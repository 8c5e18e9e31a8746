"""Linear-algebra substrate for the solver services.

Operator wrappers, small dense eigendecompositions, a rightmost-eigenpair
Arnoldi driver, nullspace projectors and minimum-length solves for
singular symmetric systems.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from services.errors import (
    InconsistentSystemError,
    NeedsDenseFallback,
    NotSymmetricError,
    PreconditionError,
    RankDeficientError,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
DENSE_SOLVE_MAX_DIM = 400
KERNEL_CUTOFF = 1e-8


@dataclass(frozen=True)
class EigPair:
    value: complex
    vector: np.ndarray


@dataclass(frozen=True)
class SymEig:
    values: np.ndarray
    vectors: np.ndarray


def make_operator(P, n=None):
    """Wrap an array, sparse matrix or callable as a real LinearOperator."""
    if isinstance(P, spla.LinearOperator):
        return P
    if callable(P):
        return spla.LinearOperator((n, n), matvec=P, dtype=float)
    return spla.aslinearoperator(P)


def as_dense(P):
    if isinstance(P, np.ndarray):
        return P.astype(float, copy=False)
    if sp.issparse(P):
        return P.toarray()
    op = make_operator(P)
    return np.asarray(op.matmat(np.eye(op.shape[1])))


def apply_real(op, v):
    """Apply a real operator to a possibly complex vector, part by part."""
    if np.iscomplexobj(v):
        return op.matvec(v.real) + 1j * op.matvec(v.imag)
    return op.matvec(v)


def sym_eig_dense(P, tol=SYMMETRY_TOL):
    P = as_dense(P)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise NotSymmetricError(f'expected a square matrix, got shape {P.shape}')
    scale = max(1.0, float(np.abs(P).max(initial=0.0)))
    asym = float(np.abs(P - P.T).max(initial=0.0))
    if asym > tol * scale:
        raise NotSymmetricError(f'matrix is not symmetric (max |P - P^T| = {asym:.3e})')
    values, vectors = la.eigh(0.5 * (P + P.T))
    return SymEig(values=values, vectors=vectors)


def _sorted_pairs(values, vectors):
    order = np.lexsort((-values.imag, -values.real))
    pairs = []
    for i in order:
        v = vectors[:, i]
        pairs.append(EigPair(value=complex(values[i]), vector=v / np.linalg.norm(v)))
    return pairs


def _take_with_ties(pairs, k, tol):
    taken = pairs[:k]
    if len(pairs) > k:
        last = taken[-1].value.real
        scale = max(1.0, abs(last))
        for extra in pairs[k:]:
            if abs(extra.value.real - last) <= tol * scale:
                taken.append(extra)
            else:
                break
    return taken


def dense_rightmost(op, k, tie_tol=1e-8):
    """Dense counterpart of arnoldi_rightmost for small operators."""
    values, vectors = la.eig(as_dense(op))
    return _take_with_ties(_sorted_pairs(values, vectors), k, tie_tol)


def arnoldi_rightmost(op, k, start, tol=1e-10, max_restarts=10):
    """Eigenpairs of op with the largest real parts, sorted descending.

    A conjugate or real tie straddling position k is reported in full, so
    the result may hold k + 1 pairs.

    Raises:
        NeedsDenseFallback: ARPACK did not converge within max_restarts, or
            the operator is too small for an implicitly restarted run.
    """
    op = make_operator(op)
    dim = op.shape[0]
    if k < 1 or k > dim:
        raise PreconditionError(f'need 1 <= k < dim, got k={k}, dim={dim}')
    start = np.asarray(start, dtype=float)
    if not np.any(start):
        raise PreconditionError('Arnoldi start vector is zero')
    request = k + 1
    if request >= dim - 1:
        # below ARPACK's minimum size
        return dense_rightmost(op, k)
    ncv = min(dim, max(20, 4 * request))
    try:
        values, vectors = spla.eigs(op, k=request, which='LR', v0=start, tol=tol,
                                    maxiter=max_restarts * ncv, ncv=ncv)
    except spla.ArpackNoConvergence as e:
        raise NeedsDenseFallback(f'Arnoldi did not converge: {len(e.eigenvalues)} of {request} pairs') from e
    except spla.ArpackError as e:
        raise NeedsDenseFallback(f'ARPACK error: {e}') from e
    taken = _take_with_ties(_sorted_pairs(values, vectors), k, 1e-8)
    last = taken[-1]
    if abs(last.value.imag) > 1e-8 * max(1.0, abs(last.value)):
        partner = np.conj(last.value)
        if all(abs(p.value - partner) > 1e-8 * max(1.0, abs(partner)) for p in taken):
            taken.append(EigPair(value=complex(partner), vector=np.conj(last.vector)))
    for pair in taken:
        res = np.linalg.norm(apply_real(op, pair.vector) - pair.value * pair.vector)
        if res > max(1e-6, 1e3 * tol) * max(1.0, abs(pair.value)):
            raise NeedsDenseFallback(f'Arnoldi residual {res:.2e} too large')
    return taken


class NullspaceProjector(spla.LinearOperator):
    """Orthogonal projector onto the nullspace of A.

    Built from a pivoted QR factorisation of A^T; with no rows it is the
    identity.
    """

    def __init__(self, A, n=None, rank_tol=1e-10):
        if A is None or (hasattr(A, 'shape') and A.shape[0] == 0):
            if n is None:
                n = A.shape[1]
            self.A = np.zeros((0, n))
            self.range_basis = np.zeros((n, 0))
        else:
            A = as_dense(A)
            m, n = A.shape
            if m >= n:
                raise PreconditionError(f'projector needs m < n, got {m} x {n}')
            Q, R, _ = la.qr(A.T, mode='economic', pivoting=True)
            diag = np.abs(np.diag(R))
            if diag.size and diag.min() <= rank_tol * diag.max():
                raise RankDeficientError(
                    f'constraint rows are linearly dependent (pivot ratio {diag.min() / diag.max():.2e})')
            self.A = A
            self.range_basis = Q
        super().__init__(dtype=float, shape=(n, n))

    @property
    def rank(self):
        return self.range_basis.shape[1]

    def _matvec(self, v):
        v = np.ravel(v)
        if self.rank == 0:
            return v.copy()
        Q = self.range_basis
        return v - Q @ (Q.T @ v)

    def _rmatvec(self, v):
        return self._matvec(v)

    def _matmat(self, V):
        if self.rank == 0:
            return np.array(V, copy=True)
        Q = self.range_basis
        return V - Q @ (Q.T @ V)

    def _adjoint(self):
        return self

    def nullspace_basis(self):
        """Orthonormal basis Z of null(A), shape n x (n - m)."""
        n = self.shape[0]
        if self.rank == 0:
            return np.eye(n)
        Q, _ = la.qr(self.A.T, mode='full')
        return Q[:, self.rank:]


def nullspace_projector(A, n=None, rank_tol=1e-10):
    return NullspaceProjector(A, n=n, rank_tol=rank_tol)


def min_length_solve(op, rhs, projector=None, tol=1e-8):
    """Minimum-length solution of op x = Pi rhs on range(Pi).

    Small systems use a dense pseudoinverse; larger ones MINRES started
    from zero, which stays in the range of the operator.
    """
    op = make_operator(op, len(rhs))
    n = op.shape[0]
    rhs = np.asarray(rhs, dtype=float)
    if projector is not None:
        rhs = projector.matvec(rhs)
        restricted = spla.LinearOperator(
            (n, n), dtype=float,
            matvec=lambda v: projector.matvec(op.matvec(projector.matvec(v))))
    else:
        restricted = op
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros(n)

    if n <= DENSE_SOLVE_MAX_DIM:
        H = as_dense(restricted)
        values, vectors = la.eigh(0.5 * (H + H.T))
        cutoff = KERNEL_CUTOFF * max(1.0, float(np.abs(values).max()))
        coeffs = vectors.T @ rhs
        keep = np.abs(values) > cutoff
        x = vectors[:, keep] @ (coeffs[keep] / values[keep])
    else:
        x, info = spla.minres(restricted, rhs, rtol=tol * 1e-2, maxiter=10 * n)
        if info != 0:
            logger.warning('MINRES stopped with info=%s', info)
    if projector is not None:
        x = projector.matvec(x)
    residual = float(np.linalg.norm(restricted.matvec(x) - rhs))
    if residual > tol * max(1.0, rhs_norm):
        raise InconsistentSystemError('minimum-length solve found no consistent solution', residual)
    return x


def gershgorin_bound(P):
    if sp.issparse(P):
        P = sp.csr_matrix(P)
        diag = P.diagonal()
        radii = np.asarray(abs(P).sum(axis=1)).ravel() - np.abs(diag)
        return float(np.max(diag + radii))
    P = np.asarray(P, dtype=float)
    diag = np.diag(P)
    radii = np.abs(P).sum(axis=1) - np.abs(diag)
    return float(np.max(diag + radii))


def spectral_upper_bound(P, margin=0.01):
    """A value strictly above the largest eigenvalue of symmetric P.

    Arrays use the Gershgorin row-sum bound; bare operators a Lanczos
    estimate. Both are padded by margin * max(1, |bound|).
    """
    if isinstance(P, np.ndarray) or sp.issparse(P):
        bound = gershgorin_bound(P)
    else:
        op = make_operator(P)
        n = op.shape[0]
        if n <= DENSE_SOLVE_MAX_DIM:
            bound = float(sym_eig_dense(as_dense(op)).values[-1])
        else:
            values = spla.eigsh(op, k=1, which='LA', tol=1e-6, return_eigenvectors=False)
            # Lanczos converges from below; pad its estimate
            bound = float(values[0]) + 1e-3 * max(1.0, abs(float(values[0])))
    return bound + margin * max(1.0, abs(bound))


def projected_min_eig(P, Z):
    """Smallest eigenvalue and eigenvector of Z^T P Z, mapped back by Z."""
    if Z.shape[1] == 0:
        return np.inf, np.zeros(Z.shape[0])
    op = make_operator(P, Z.shape[0])
    H = Z.T @ np.asarray(op.matmat(Z))
    eig = sym_eig_dense(0.5 * (H + H.T), tol=np.inf)
    return float(eig.values[0]), Z @ eig.vectors[:, 0]
