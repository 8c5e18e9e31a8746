"""Generate-then-solve benchmark over sizes and seeds."""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from services import qpmode
from services.errors import NormQPError
from services.feasibility import initial_point
from services.generator import generate
from services.options import SolverOptions

logger = logging.getLogger(__name__)

BENCH_FIELDS = ['n', 'seed', 'status', 'time', 'feas_time', 'f', 'kkt_err', 'max_feas_violation']


def feasibility_violation(prob, x):
    """max((A x - b)_i, ||x||^2 - r_max^2, r_min^2 - ||x||^2, 0)."""
    sq = float(x @ x)
    slack = float(np.max(prob.A @ x - prob.b, initial=0.0)) if prob.m else 0.0
    return max(slack, sq - prob.r_max ** 2, prob.r_min ** 2 - sq, 0.0)


def bench_instance(n, seed, opts=None, m_factor=1.5, r=100.0, timing=True):
    opts = opts or SolverOptions()
    row = {'n': n, 'seed': seed, 'status': '', 'time': '', 'feas_time': '', 'f': '', 'kkt_err': '',
           'max_feas_violation': ''}
    prob = generate(n, m_factor=m_factor, r=r, seed=seed).to_norm_qp()
    try:
        start = time.perf_counter()
        feas = initial_point(prob.A, prob.b, prob.r_min, prob.r_max, opts)
        feas_time = time.perf_counter() - start
        if timing:
            row['feas_time'] = f'{feas_time:.6f}'
        if not feas.feasible:
            row['status'] = feas.status.value
            return row
        start = time.perf_counter()
        result = qpmode.solve(prob, feas.x0, opts)
        elapsed = time.perf_counter() - start
    except NormQPError as e:
        logger.warning('bench n=%d seed=%d failed: %s', n, seed, e)
        row['status'] = f'error: {e}'
        return row
    except (la.LinAlgError, spla.ArpackError) as e:
        logger.warning('bench n=%d seed=%d: numerical failure: %s', n, seed, e)
        row['status'] = 'solver_failure'
        return row
    row.update({
        'status': result.status.value,
        'f': repr(result.objective),
        'kkt_err': f'{result.kkt_residual:.3e}',
        'max_feas_violation': f'{feasibility_violation(prob, result.x):.3e}',
    })
    if timing:
        row['time'] = f'{elapsed:.6f}'
    return row


def run_bench(sizes, seeds, opts=None, m_factor=1.5, r=100.0, workers=1, timing=True):
    """One row per (n, seed), sorted by (n, seed) whatever the worker count."""
    opts = opts or SolverOptions()
    jobs = sorted((n, seed) for n in sizes for seed in seeds)

    def _run(job):
        return bench_instance(job[0], job[1], opts, m_factor, r, timing)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run, jobs))
    else:
        rows = [_run(job) for job in jobs]
    return rows


def write_csv(rows, stream):
    writer = csv.DictWriter(stream, fieldnames=BENCH_FIELDS, lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, '') for k in writer.fieldnames})
