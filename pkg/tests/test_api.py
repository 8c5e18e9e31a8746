import pytest

INDEFINITE = {'P': [[-2, 0], [0, 1]], 'q': [0, 0], 'A': [[1, 0]], 'b': [0], 'r_max': 1}


def test_health(client):
    resp = client.get('/api/health')
    assert resp.status_code == 200
    assert resp.get_json()['status'] == 'ok'


def test_trs_hard_case(client):
    resp = client.post('/api/trs', json={'P': [[1, 0], [0, 2]], 'q': [0, 0.5], 'r': 1})
    assert resp.status_code == 200
    data = resp.get_json()
    assert data['kind'] == 'HardCasePair'
    assert len(data['points']) == 2


def test_trs_sparse_triplets(client):
    P = {'rows': [0, 1], 'cols': [0, 1], 'vals': [1.0, 2.0]}
    resp = client.post('/api/trs', json={'P': P, 'q': [0, 0.5], 'r': 1})
    assert resp.status_code == 200
    assert resp.get_json()['kind'] == 'HardCasePair'


def test_solve_requires_fields(client):
    resp = client.post('/api/solve', json={'P': [[1]], 'q': [0]})
    assert resp.status_code == 400
    assert 'r_max' in resp.get_json()['error']
    assert client.post('/api/solve', data='nope').status_code == 400


def test_solve_malformed_matrix(client):
    resp = client.post('/api/solve', json={'P': [[1, 0]], 'q': [0, 0], 'r_max': 1})
    assert resp.status_code == 400


def test_solve_infeasible(client):
    resp = client.post('/api/solve', json={'P': [[1, 0], [0, 1]], 'q': [0, 0], 'A': [[-1, 0]],
                                           'b': [-2], 'r_max': 1})
    assert resp.status_code == 422
    assert resp.get_json()['status'] == 'infeasible_outer'


def test_solve(client):
    resp = client.post('/api/solve', json=INDEFINITE)
    assert resp.status_code == 200
    data = resp.get_json()
    assert data['status'] == 'optimal'
    assert data['objective'] == pytest.approx(-1.0)
    assert data['x'] == pytest.approx([-1.0, 0.0], abs=1e-8)
    assert 'trace' not in data


def test_solve_with_trace(client):
    resp = client.post('/api/solve', json=dict(INDEFINITE, trace=True))
    assert resp.status_code == 200
    trace = resp.get_json()['trace']
    assert trace
    assert set(trace[0]) == {'iter', 'W', 'f', 'step_type', 'kkt_err'}


def test_generate_problem(client):
    resp = client.post('/api/problems/generate', json={'n': 4, 'seed': 2})
    assert resp.status_code == 200
    assert resp.mimetype == 'text/plain'
    assert resp.get_data(as_text=True).startswith('n 4\nm 6\n')
    assert client.post('/api/problems/generate', json={}).status_code == 400


def test_runs_and_export(client):
    client.post('/api/solve', json=INDEFINITE)
    data = client.get('/api/runs?command=solve').get_json()
    assert data['total'] == 1
    assert data['runs'][0]['target'] == 'api'
    resp = client.get('/api/runs/export')
    assert resp.mimetype == 'text/csv'
    assert resp.get_data(as_text=True).splitlines()[0] == (
        'id,timestamp,command,target,status,objective,kkt_error,elapsed,details')
