"""Boundary facades for the CLI and the HTTP API.

Each returns (success, data): data is a report dict on success and a
Failure (message plus exit code) otherwise. Every call is recorded in the
run log.
"""

import json
import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from services import qpmode
from services.bench import feasibility_violation, run_bench
from services.docword import load_docword, load_vocab
from services.errors import (
    InfeasibleError,
    NormQPError,
    NotSymmetricError,
    PreconditionError,
    ProblemParseError,
    RankDeficientError,
)
from services.feasibility import initial_point
from services.generator import generate
from services.options import SolverOptions
from services.problem_io import format_problem
from services.run_log import log_run
from services.sparsepca import DataMatrix, principal_components
from services.trs import solve_trs

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3


@dataclass(frozen=True)
class Failure:
    message: str
    exit_code: int
    status: str = 'error'

    def __str__(self):
        return self.message

    @property
    def http_status(self):
        return {EXIT_INPUT: 400, EXIT_INFEASIBLE: 422}.get(self.exit_code, 500)


def classify(exc):
    if isinstance(exc, (ProblemParseError, PreconditionError, NotSymmetricError, RankDeficientError,
                        OSError, ValueError)):
        return Failure(str(exc), EXIT_INPUT, 'invalid_input')
    if isinstance(exc, InfeasibleError):
        return Failure(str(exc), EXIT_INFEASIBLE, exc.status)
    return Failure(str(exc), EXIT_SOLVER, 'solver_failure')


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f'{type(value).__name__} is not JSON serializable')


def to_json(data):
    return json.dumps(data, sort_keys=True, default=_json_default)


def _fail(command, target, exc, started):
    failure = exc if isinstance(exc, Failure) else classify(exc)
    logger.warning('%s %s failed: %s', command, target, failure.message)
    log_run(command, target, failure.status, elapsed=time.perf_counter() - started, details=failure.message)
    return False, failure


def trs_report(problem, ball=False, opts=None, target='-'):
    opts = opts or SolverOptions()
    started = time.perf_counter()
    try:
        if not ball and problem.r_min != problem.r_max:
            raise PreconditionError(f'TRS needs r_min == r_max (got {problem.r_min}, {problem.r_max}); '
                                    'use --ball for ||x|| <= r_max')
        prob = problem.to_trs_problem(ball=ball)
        outcome = solve_trs(prob, opts)
    except (NormQPError, la.LinAlgError, spla.ArpackError) as e:
        return _fail('trs', target, e, started)
    elapsed = time.perf_counter() - started
    data = outcome.to_dict()
    data['objective'] = outcome.objective(prob.P, prob.q)
    log_run('trs', target, outcome.kind.value, objective=data['objective'][0],
            kkt_error=outcome.diagnostics.get('stationarity'), elapsed=elapsed)
    return True, data


def _parse_x0(x0, n):
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != n:
        raise PreconditionError(f'x0 has {x0.size} entries, expected {n}')
    return x0


def solve_report(problem, x0=None, opts=None, callback=None, target='-'):
    """Feasibility phase (unless x0 is given) then the annulus active set."""
    opts = opts or SolverOptions()
    started = time.perf_counter()
    try:
        prob = problem.to_norm_qp()
        if x0 is None:
            x0 = problem.x0
        feasibility = 'given'
        if x0 is None:
            feas = initial_point(prob.A, prob.b, prob.r_min, prob.r_max, opts)
            feasibility = feas.status.value
            if not feas.feasible:
                raise InfeasibleError(feas.message, status=feasibility)
            x0 = feas.x0
        x0 = _parse_x0(x0, prob.n)
        solve_started = time.perf_counter()
        result = qpmode.solve(prob, x0, opts, callback)
    except (NormQPError, la.LinAlgError, spla.ArpackError) as e:
        return _fail('solve', target, e, started)
    elapsed = time.perf_counter() - solve_started
    data = result.to_dict()
    data['feasibility'] = feasibility
    data['max_feas_violation'] = feasibility_violation(prob, result.x)
    log_run('solve', target, result.status.value, objective=result.objective,
            kkt_error=result.kkt_residual, elapsed=elapsed, details=f'feasibility={feasibility}')
    logger.info('solve %s: %s f=%.10g kkt=%.3e', target, result.status.value, result.objective,
                result.kkt_residual)
    return True, data


def generate_report(n, m_factor=1.5, r=100.0, seed=0):
    started = time.perf_counter()
    try:
        problem = generate(n, m_factor=m_factor, r=r, seed=seed)
    except NormQPError as e:
        return _fail('gen', f'n={n} seed={seed}', e, started)
    log_run('gen', f'n={n} seed={seed}', 'ok', elapsed=time.perf_counter() - started)
    return True, {'n': problem.n, 'm': problem.m, 'text': format_problem(problem)}


def pca_report(docword_path, vocab_path, k=1, cardinality=5, nonneg=False, transpose=False, opts=None):
    """Sparse components of a docword corpus with their top-weighted tokens."""
    opts = opts or SolverOptions()
    started = time.perf_counter()
    target = str(docword_path)
    try:
        counts = load_docword(docword_path, transpose=transpose)
        vocab = load_vocab(vocab_path)
        data = DataMatrix(counts)
        if not transpose and len(vocab) < data.n:
            raise PreconditionError(f'vocabulary has {len(vocab)} tokens, corpus has {data.n} words')
        if cardinality > data.n:
            raise PreconditionError(f'cardinality {cardinality} exceeds the {data.n} variables')
        components = principal_components(data, k, cardinality, opts, nonneg=nonneg)
    except (NormQPError, OSError, la.LinAlgError, spla.ArpackError) as e:
        return _fail('pca', target, e, started)
    rows = []
    for index, comp in enumerate(components, start=1):
        order = sorted(comp.support.tolist(), key=lambda j: (-abs(comp.x[j]), j))
        labels = vocab if not transpose else [f'doc{j + 1}' for j in range(data.n)]
        rows.append({
            'component': index,
            'variance': comp.variance,
            'cardinality': comp.cardinality,
            'exact': comp.exact,
            'tokens': [labels[j] for j in order],
            'weights': [float(comp.x[j]) for j in order],
        })
    log_run('pca', target, 'ok', objective=rows[0]['variance'] if rows else None,
            elapsed=time.perf_counter() - started, details=f'k={k} cardinality={cardinality}')
    return True, {'components': rows}


def bench_report(sizes, seeds, opts=None, m_factor=1.5, r=100.0, workers=1, timing=True):
    opts = opts or SolverOptions()
    started = time.perf_counter()
    rows = run_bench(sizes, seeds, opts, m_factor=m_factor, r=r, workers=workers, timing=timing)
    failed = sum(1 for row in rows if row['status'] != 'optimal')
    log_run('bench', f'sizes={list(sizes)} seeds={list(seeds)}', 'ok' if not failed else f'{failed} not optimal',
            elapsed=time.perf_counter() - started)
    return True, {'rows': rows}
