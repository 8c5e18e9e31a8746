import csv
import io

import numpy as np
import scipy.sparse as sp
from flask import Blueprint, Response, current_app, jsonify, request

from services.options import SolverOptions
from services.problem_io import ProblemFile

solver_bp = Blueprint('solver', __name__, url_prefix='/api')

RUN_FIELDS = ['id', 'timestamp', 'command', 'target', 'status', 'objective', 'kkt_error', 'elapsed', 'details']


def _options(data=None):
    opts = SolverOptions.from_config(current_app.config)
    if data and data.get('max_iter') is not None:
        opts = opts.replace(max_iter=int(data['max_iter']))
    return opts


def _matrix(value, name, shape):
    """Dense nested list or {"rows", "cols", "vals"} triplets (0-indexed)."""
    if isinstance(value, dict):
        P = sp.csr_matrix((value['vals'], (value['rows'], value['cols'])), shape=shape)
    else:
        P = np.asarray(value, dtype=float).reshape(shape)
    if not np.all(np.isfinite(P.data if sp.issparse(P) else P)):
        raise ValueError(f'{name} has non-finite entries')
    return P


def _problem_from_json(data, trs=False):
    q = np.asarray(data['q'], dtype=float).ravel()
    n = q.size
    A = data.get('A') or []
    m = len(A)
    r_max = float(data['r'] if trs else data['r_max'])
    r_min = r_max if trs else float(data.get('r_min', 0.0))
    return ProblemFile(
        n=n, m=m,
        P=_matrix(data['P'], 'P', (n, n)),
        q=q,
        A=np.asarray(A, dtype=float).reshape(m, n),
        b=np.asarray(data.get('b') or [], dtype=float).ravel(),
        r_min=r_min, r_max=r_max,
        x0=None if data.get('x0') is None else np.asarray(data['x0'], dtype=float),
    )


def _error(failure):
    return jsonify({'error': str(failure), 'status': failure.status}), failure.http_status


@solver_bp.route('/health', methods=['GET'])
def health():
    return jsonify({'app': current_app.config.get('APP_NAME', 'NormQP Tools'), 'status': 'ok'})


@solver_bp.route('/trs', methods=['POST'])
def trs():
    from services.solver_api import trs_report
    data = request.get_json(silent=True)
    if not data:
        return jsonify({'error': 'JSON body required'}), 400
    for field in ('P', 'q', 'r'):
        if data.get(field) is None:
            return jsonify({'error': f'{field} is required'}), 400
    try:
        problem = _problem_from_json(data, trs=True)
    except (KeyError, TypeError, ValueError) as e:
        return jsonify({'error': f'malformed problem: {e}'}), 400
    success, result = trs_report(problem, ball=bool(data.get('ball')), opts=_options(data), target='api')
    if not success:
        return _error(result)
    return jsonify(result)


@solver_bp.route('/solve', methods=['POST'])
def solve():
    from services.solver_api import solve_report
    data = request.get_json(silent=True)
    if not data:
        return jsonify({'error': 'JSON body required'}), 400
    for field in ('P', 'q', 'r_max'):
        if data.get(field) is None:
            return jsonify({'error': f'{field} is required'}), 400
    try:
        problem = _problem_from_json(data)
    except (KeyError, TypeError, ValueError) as e:
        return jsonify({'error': f'malformed problem: {e}'}), 400
    trace = []
    success, result = solve_report(problem, opts=_options(data), target='api',
                                   callback=trace.append if data.get('trace') else None)
    if not success:
        return _error(result)
    if trace:
        result['trace'] = [event.as_row() for event in trace]
    return jsonify(result)


@solver_bp.route('/problems/generate', methods=['POST'])
def generate_problem():
    from services.solver_api import generate_report
    data = request.get_json(silent=True) or {}
    try:
        n = int(data['n'])
        seed = int(data.get('seed', 0))
        m_factor = float(data.get('m_factor', 1.5))
        r = float(data.get('r', 100.0))
    except (KeyError, TypeError, ValueError):
        return jsonify({'error': 'n (integer) is required; seed, m_factor, r must be numbers'}), 400
    success, result = generate_report(n, m_factor=m_factor, r=r, seed=seed)
    if not success:
        return _error(result)
    return Response(result['text'], mimetype='text/plain')


@solver_bp.route('/runs', methods=['GET'])
def runs():
    from services.run_log import get_run_log
    limit = request.args.get('limit', 50, type=int)
    offset = request.args.get('offset', 0, type=int)
    command = request.args.get('command', '')
    rows, total = get_run_log(limit=limit, offset=offset, command_filter=command)
    return jsonify({'runs': rows, 'total': total})


@solver_bp.route('/runs/export', methods=['GET'])
def export_runs():
    from services.run_log import get_run_log
    rows, _ = get_run_log(limit=10000)
    output = io.StringIO()
    writer = csv.DictWriter(output, fieldnames=RUN_FIELDS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, '') for k in writer.fieldnames})

    return Response(
        output.getvalue(), mimetype='text/csv',
        headers={'Content-Disposition': 'attachment; filename=solver_runs.csv'},
    )
